import numpy as np
import pytest
from hypothesis import given, strategies as st

from fieldseg.datakit import (LabelBudget, Sample, SampleRecord, SplitAssignment, assign_splits, augment,
                              downsample_imagery, epoch_rng, iterate_batches, make_multitemporal_input,
                              read_manifest, sample_from_scene, sample_partial_labels, transform, write_manifest)
from fieldseg.geometry import FieldPolygon, GridGeometry, RasterGrid, rasterize_ids
from fieldseg.synthland import domain_preset, generate_landscape


@pytest.fixture(scope="module")
def scene():
    return generate_landscape(domain_preset("target-small", seed=21, extent_px=(64, 64)))


# -- splits

def test_all_train_fractions(rng):
    sa = assign_splits(rng.uniform(0, 100, (30, 2)), (5, 5), (1.0, 0.0, 0.0))
    assert set(sa.scene_splits) == {"train"}


def test_split_assignment_is_deterministic_and_round_trips(rng):
    locs = rng.uniform(0, 100, (50, 2))
    a = assign_splits(locs, seed=3)
    b = assign_splits(locs, seed=3)
    assert a.cell_to_split == b.cell_to_split and a.scene_splits == b.scene_splits
    back = SplitAssignment.from_json(a.to_json())
    assert back.cell_to_split == a.cell_to_split and back.scene_splits == a.scene_splits


def test_realized_fractions_match_request(rng):
    sa = assign_splits(rng.uniform(0, 100, (10, 2)), (20, 20), (0.64, 0.16, 0.20))
    assert sa.realized_fractions() == (0.64, 0.16, 0.20)


def test_scenes_in_one_cell_share_a_split():
    locs = [[1.0, 1.0], [1.5, 1.2], [99.0, 99.0], [0.0, 0.0]]
    sa = assign_splits(locs, (4, 4), bounds=(0, 0, 100, 100))
    assert sa.scene_splits[0] == sa.scene_splits[1] == sa.scene_splits[3]


def test_split_errors():
    with pytest.raises(ValueError, match="empty"):
        assign_splits(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        assign_splits([[0, 0]], fractions=(0.5, 0.2, 0.2))


# -- partial labels

def test_budget_arithmetic():
    assert LabelBudget(200, 8).n_images == 25
    with pytest.raises(ValueError, match="divisible"):
        LabelBudget(200, 3)


def test_all_fields_gives_full_label(scene):
    (subset,) = sample_partial_labels(scene.polygons, len(scene.polygons), seed=0)
    full = sample_from_scene(scene)
    part = sample_from_scene(scene, subset)
    np.testing.assert_array_equal(full.labels, part.labels)


@pytest.mark.parametrize("mode", ["anchor", "uniform"])
def test_subsets_are_disjoint_and_reproducible(scene, mode):
    a = sample_partial_labels(scene.polygons, 4, seed=7, n_subsets=3, mode=mode)
    b = sample_partial_labels(scene.polygons, 4, seed=7, n_subsets=3, mode=mode)
    assert [[p.id for p in s] for s in a] == [[p.id for p in s] for s in b]
    ids = [p.id for s in a for p in s]
    assert len(ids) == len(set(ids)) == 12


def test_anchor_subset_is_spatially_compact(scene):
    (subset,) = sample_partial_labels(scene.polygons, 5, seed=1, mode="anchor")
    cents = np.array([p.ring.mean(axis=0) for p in scene.polygons])
    chosen = np.array([p.ring.mean(axis=0) for p in subset])
    spread = np.ptp(chosen, axis=0).max()
    assert spread < np.ptp(cents, axis=0).max() / 2


def test_running_out_of_fields_warns(scene):
    with pytest.warns(UserWarning, match="fields left"):
        subsets = sample_partial_labels(scene.polygons[:5], 2, seed=0, n_subsets=3)
    assert len(subsets) == 2


def test_partial_label_mask_excludes_unlabelled_fields(scene):
    (subset,) = sample_partial_labels(scene.polygons, 3, seed=2)
    s = sample_from_scene(scene, subset)
    ids = rasterize_ids(scene.polygons, scene.grid)
    others = np.isin(ids, [p.id for p in scene.polygons if p not in subset]) & (s.labels[3] == 0)
    assert others.any()
    assert s.labels[0].sum() == sum((ids == p.id).sum() for p in subset)
    assert s.n_labeled == 3


# -- resolution

def test_downsample_factor_one_is_identity(rng):
    g = RasterGrid(rng.random((6, 6, 2)), 4.77)
    out = downsample_imagery(g, 1)
    np.testing.assert_array_equal(out.data, g.data)
    assert out.pixel_size == 4.77


def test_downsample_constant_stays_constant():
    g = RasterGrid(np.full((8, 8, 3), 0.3), 4.8)
    out = downsample_imagery(g, 2)
    np.testing.assert_allclose(out.data, 0.3)
    assert out.data.shape == (4, 4, 3)


def test_downsample_factor_three_shrinks_fields_ninefold():
    g = RasterGrid(np.zeros((90, 90, 1)), 4.77)
    out = downsample_imagery(g, 3)
    assert out.pixel_size == pytest.approx(14.31)
    poly = FieldPolygon(1, g.geometry.pixel_box(0, 0, 30, 60))
    before = rasterize_ids([poly], g.geometry).sum()
    after = rasterize_ids([poly], out.geometry).sum()
    assert before == 9 * after == 1800


def test_downsample_warns_on_crop_and_rejects_bad_factor():
    g = RasterGrid(np.zeros((7, 8, 1)), 1.0)
    with pytest.warns(UserWarning, match="cropped"):
        assert downsample_imagery(g, 2).data.shape == (3, 4, 1)
    with pytest.raises(ValueError):
        downsample_imagery(g, 0)
    with pytest.raises(ValueError):
        downsample_imagery(g, 10)


def test_downsampled_sample_labels_from_vectors(scene):
    s = sample_from_scene(scene, factor=2)
    assert s.seasons[0].shape == (3, 32, 32) and s.labels.shape == (4, 32, 32)
    g = GridGeometry(32, 32, scene.grid.pixel_size * 2, scene.grid.origin)
    np.testing.assert_array_equal(s.field_ids, rasterize_ids(scene.polygons, g))


# -- augmentation

def test_identity_transform(rng):
    x = rng.random((3, 5, 7))
    np.testing.assert_array_equal(transform(x, 0, False, False), x)


def test_half_turn_is_an_involution(rng):
    x = rng.random((2, 6, 6))
    np.testing.assert_array_equal(transform(transform(x, 2, False, False), 2, False, False), x)


@given(st.integers(0, 2 ** 31 - 1))
def test_augment_preserves_extent_count_and_alignment(seed):
    rng = np.random.default_rng(seed)
    lab = (rng.random((4, 9, 9)) > 0.5).astype(np.float32)
    img = lab[:3].copy()
    a_img, a_lab = augment(img, lab, seed=seed)
    assert a_lab[0].sum() == lab[0].sum()
    np.testing.assert_array_equal(a_img, a_lab[:3])


def test_augment_rejects_misaligned():
    with pytest.raises(ValueError):
        augment(np.zeros((3, 4, 4)), np.zeros((4, 4, 5)))


# -- multi-temporal inputs

def test_single_season_modes_agree(rng):
    s = [rng.random((3, 4, 4))]
    a = make_multitemporal_input(s, "separate")
    b = make_multitemporal_input(s, "stacked")
    np.testing.assert_array_equal(a[0], b[0])


def test_stacked_concatenates_in_order(rng):
    s = [rng.random((3, 4, 4)) for _ in range(3)]
    (x,) = make_multitemporal_input(s, "stacked")
    np.testing.assert_array_equal(x[3:6], s[1])
    (y,) = make_multitemporal_input(s, "stacked", shuffle=True, rng=np.random.default_rng(0))
    assert sorted(map(bytes, np.split(y, 3))) == sorted(map(bytes, np.split(x, 3)))
    with pytest.raises(ValueError):
        make_multitemporal_input(s, "sideways")
    with pytest.raises(ValueError):
        make_multitemporal_input([], "stacked")


# -- batching

def _toy_samples(n=5):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        lab = np.zeros((4, 16, 16), np.float32)
        lab[:, 4:12, 4:12] = 1
        out.append(Sample(f"s{i}", [rng.random((3, 16, 16)).astype(np.float32) for _ in range(2)], lab))
    return out


def test_batches_are_deterministic_per_epoch():
    samples = _toy_samples()
    a = list(iterate_batches(samples, 2, crop=8, seed=1, epoch=3, steps=4))
    b = list(iterate_batches(samples, 2, crop=8, seed=1, epoch=3, steps=4))
    c = list(iterate_batches(samples, 2, crop=8, seed=1, epoch=4, steps=4))
    assert len(a) == 4
    for (xa, ya), (xb, yb) in zip(a, b):
        assert xa.tobytes() == xb.tobytes() and ya.tobytes() == yb.tobytes()
    assert any(xa.tobytes() != xc.tobytes() for (xa, _), (xc, _) in zip(a, c))


def test_batch_shapes_by_input_mode():
    samples = _toy_samples()
    x, y = next(iterate_batches(samples, 3, crop=8, seed=0, epoch=0))
    assert x.shape == (3, 3, 8, 8) and y.shape == (3, 4, 8, 8)
    x, _ = next(iterate_batches(samples, 2, crop=None, seed=0, epoch=0, input_mode="stacked"))
    assert x.shape == (2, 6, 16, 16)
    with pytest.raises(ValueError):
        next(iterate_batches([], 2, crop=8, seed=0, epoch=0))


def test_crops_prefer_supervised_windows():
    samples = _toy_samples(1)
    for _, y in iterate_batches(samples, 1, crop=4, seed=0, epoch=0, steps=20, augment_data=False):
        assert y[0, 3].any()


def test_epoch_rng_streams_are_independent():
    assert epoch_rng(0, 1).random() != epoch_rng(0, 2).random()
    assert epoch_rng(5, 1).random() == epoch_rng(5, 1).random()


def test_manifest_round_trip(tmp_path):
    recs = [SampleRecord("a", (0, 0, 64, 64), ["a_s0"], "a_labels", "train", [3, 6, 9])]
    write_manifest(tmp_path / "m.jsonl", recs)
    assert read_manifest(tmp_path / "m.jsonl") == recs
