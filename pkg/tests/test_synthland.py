import warnings

import numpy as np
import pytest
from shapely.ops import unary_union

from fieldseg.synthland import (PRESETS, LandscapeSpec, domain_preset, field_reflectance, generate_domain,
                                generate_landscape, load_domain, render_low_contrast_variant, save_domain,
                                scene_seed)

SMALL = dict(extent_px=(64, 64))


@pytest.fixture(scope="module")
def scene():
    return generate_landscape(domain_preset("target-small", seed=11, **SMALL))


def test_same_seed_is_bit_identical():
    spec = domain_preset("target-small", seed=5, **SMALL)
    a, b = generate_landscape(spec), generate_landscape(spec)
    for ga, gb in zip(a.imagery, b.imagery):
        assert ga.data.tobytes() == gb.data.tobytes()
    assert [p.ring.tobytes() for p in a.polygons] == [p.ring.tobytes() for p in b.polygons]
    np.testing.assert_array_equal(a.noncrop_mask, b.noncrop_mask)


def test_different_seeds_differ():
    a = generate_landscape(domain_preset("target-small", seed=1, **SMALL))
    b = generate_landscape(domain_preset("target-small", seed=2, **SMALL))
    assert a.imagery[0].data.tobytes() != b.imagery[0].data.tobytes()


def test_zero_crop_fraction_gives_pure_background():
    sc = generate_landscape(domain_preset("target-small", seed=1, crop_fraction=0.0, **SMALL))
    assert sc.polygons == [] and sc.noncrop_mask.all()


def test_polygons_are_valid_and_disjoint(scene):
    shapes = [p.to_shapely() for p in scene.polygons]
    assert all(s.is_valid for s in shapes)
    union = unary_union(shapes).area
    assert union == pytest.approx(sum(s.area for s in shapes), rel=1e-9)


def test_noncrop_mask_is_complement_of_fields(scene):
    np.testing.assert_array_equal(scene.noncrop_mask, (scene.field_ids() == 0).astype(np.uint8))
    assert 0.05 < scene.noncrop_mask.mean() < 0.3


def test_imagery_shape_and_range(scene):
    assert len(scene.imagery) == scene.spec.n_seasons
    for g in scene.imagery:
        assert g.data.shape == (64, 64, 3) and g.data.dtype == np.float32
        assert g.data.min() >= 0 and g.data.max() <= 1


def _median_area_px(name, n=6):
    spec = domain_preset(name, seed=3)
    areas = [p.area / spec.pixel_size ** 2 for s in generate_domain(spec, n) for p in s.polygons]
    return float(np.median(areas)), spec


def test_target_small_median_field_is_about_104_px():
    # 2400 m^2 / (4.8 m)^2 = 104.17 px^2
    med, _ = _median_area_px("target-small")
    assert abs(med - 104.17) / 104.17 < 0.15


def test_preset_median_ratio():
    small, s_spec = _median_area_px("target-small")
    large, l_spec = _median_area_px("source-large")
    ratio = (large * l_spec.pixel_size ** 2) / (small * s_spec.pixel_size ** 2)
    assert abs(ratio - 13000 / 2400) / (13000 / 2400) < 0.15


def test_unresolvable_fields_raise():
    with pytest.raises(ValueError, match="unresolvable"):
        generate_landscape(LandscapeSpec(pixel_size=30.0, size_lognormal=(np.log(2400.0), 0.6)))


def test_invalid_spec_and_preset():
    with pytest.raises(ValueError):
        LandscapeSpec(crop_fraction=1.5)
    with pytest.raises(ValueError, match="source-large"):
        domain_preset("nowhere")
    assert set(PRESETS) == {"source-large", "target-small"}


def test_spec_dict_round_trip():
    spec = domain_preset("source-large", seed=9)
    assert LandscapeSpec.from_dict(spec.to_dict()) == spec


def test_contrast_drop_zero_is_identity(scene):
    low = render_low_contrast_variant(scene, 0.0)
    for a, b in zip(scene.imagery, low.imagery):
        np.testing.assert_array_equal(a.data, b.data)


def test_contrast_drop_one_makes_fields_identical(scene):
    for s in range(scene.spec.n_seasons):
        refl = field_reflectance(scene, s, contrast=0.0)
        assert np.all(refl == refl[0])
    low = render_low_contrast_variant(scene, 1.0)
    ids = scene.field_ids()
    interior = np.zeros_like(ids, dtype=bool)
    interior[2:-2, 2:-2] = True
    means = [low.imagery[0].data[(ids == f) & interior].mean(axis=0) for f in np.unique(ids[ids > 0])
             if ((ids == f) & interior).sum() > 20]
    assert np.ptp(np.asarray(means), axis=0).max() < 0.02


def test_half_contrast_quarters_variance(scene):
    # noise-free draws scale exactly with the spread
    c = scene.spec.contrast
    full = field_reflectance(scene, 1)
    half = field_reflectance(scene, 1, contrast=0.5 * c)
    np.testing.assert_allclose(half.var(axis=0), 0.25 * full.var(axis=0), rtol=1e-9)
    # and the rendered imagery follows up to blur and noise
    low = render_low_contrast_variant(scene, 0.5)
    ids = scene.field_ids()
    big = [f for f in np.unique(ids[ids > 0]) if (ids == f).sum() > 60]
    v_full = np.var([scene.imagery[1].data[ids == f].mean(axis=0) for f in big], axis=0)
    v_low = np.var([low.imagery[1].data[ids == f].mean(axis=0) for f in big], axis=0)
    np.testing.assert_allclose(v_low / v_full, 0.25, atol=0.05)


def test_contrast_drop_range():
    sc = generate_landscape(domain_preset("target-small", seed=0, extent_px=(32, 32)))
    with pytest.raises(ValueError):
        render_low_contrast_variant(sc, 1.2)


def test_domain_save_load_round_trip(tmp_path):
    spec = domain_preset("target-small", seed=2, extent_px=(32, 32))
    scenes = generate_domain(spec, 3, name="t")
    path = save_domain(scenes, tmp_path / "a", "t")
    back = load_domain(tmp_path / "a")
    assert [s.scene_id for s in back] == ["t-0000", "t-0001", "t-0002"]
    for a, b in zip(scenes, back):
        np.testing.assert_array_equal(a.imagery[2].data, b.imagery[2].data)
        np.testing.assert_array_equal(a.field_ids(), b.field_ids())
        assert a.location == b.location and a.spec == b.spec
    save_domain(generate_domain(spec, 3, name="t"), tmp_path / "b", "t")
    assert path.read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_scene_seeds_are_distinct():
    seeds = {scene_seed(0, i) for i in range(500)}
    assert len(seeds) == 500


def test_generation_emits_no_degenerate_polygons():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for seed in range(5):
            generate_landscape(domain_preset("target-small", seed=seed, **SMALL)).field_ids()
