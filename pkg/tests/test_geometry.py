import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fieldseg.geometry import (DegeneratePolygonWarning, EmptyInstanceWarning, FieldPolygon, GridGeometry,
                               LabelStack, RasterGrid, UnsupervisableTileWarning, build_mask, distance_from_ids,
                               labels_from_ids, mask_coverage, rasterize_boundary, rasterize_distance,
                               rasterize_extent, rasterize_ids, rasterize_labels, vectorize_instances)
from oracles import distance_by_brute_force, extent_by_shapely, random_tiling, ring_by_chebyshev

# pixel-unit grid: world x = column, world y = -row
G8 = GridGeometry(8, 8, 1.0, (0.0, 0.0))


def square(pid, r0, c0, r1, c1, grid=G8):
    return FieldPolygon(pid, grid.pixel_box(r0, c0, r1, c1))


def test_field_polygon_validation():
    with pytest.raises(ValueError):
        FieldPolygon(0, [[0, 0], [1, 0], [1, 1]])
    with pytest.raises(ValueError):
        FieldPolygon(1, [[0, 0], [1, 0]])
    p = FieldPolygon(3, [[0, 0], [2, 0], [2, 2], [0, 2], [0, 0]])
    assert len(p.ring) == 4 and p.area == 4.0 and p.is_valid()


def test_grid_round_trip(rng):
    g = GridGeometry(10, 12, 4.8, (500.0, 1000.0))
    cr = rng.uniform(0, 10, size=(20, 2))
    np.testing.assert_allclose(g.to_pixel(g.to_world(cr)), cr, atol=1e-9)


def test_extent_empty_list_is_zero():
    assert rasterize_extent([], G8).sum() == 0


def test_extent_square_covers_sixteen_pixels():
    # square over pixels rows 2..5, cols 2..5
    ext = rasterize_extent([square(1, 2, 2, 6, 6)], G8)
    assert ext.sum() == 16
    assert ext[2:6, 2:6].all()


def test_extent_two_disjoint_squares_add_up():
    a, b = square(1, 0, 0, 2, 3), square(2, 5, 4, 8, 8)
    ext = rasterize_extent([a, b], G8)
    assert ext.sum() == rasterize_extent([a], G8).sum() + rasterize_extent([b], G8).sum() == 6 + 12


def _random_polygon(rng, grid):
    k = int(rng.integers(3, 8))
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    rad = rng.uniform(1.5, min(grid.height, grid.width) / 2, k)
    cx, cy = rng.uniform(2, grid.width - 2), rng.uniform(2, grid.height - 2)
    cols = cx + rad * np.cos(ang)
    rows = cy + rad * np.sin(ang)
    return grid.to_world(np.stack([cols, rows], axis=1))


@pytest.mark.parametrize("seed", range(100))
def test_extent_matches_shapely_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(6, 33, 2))
    g = GridGeometry(h, w, float(rng.uniform(0.5, 5)), (float(rng.uniform(-50, 50)), float(rng.uniform(-50, 50))))
    polys = []
    for i in range(int(rng.integers(1, 4))):
        ring = _random_polygon(rng, g)
        p = FieldPolygon(i + 1, ring)
        if p.to_shapely().is_valid:
            polys.append(p)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneratePolygonWarning)
        ours = rasterize_ids(polys, g)
    kept = [p for p in polys if p.area >= g.pixel_size ** 2]
    np.testing.assert_array_equal(ours, extent_by_shapely(kept, g))


def test_degenerate_polygon_is_skipped_and_reported():
    tiny = FieldPolygon(5, [[0.1, -0.1], [0.6, -0.1], [0.6, -0.6]])
    with pytest.warns(DegeneratePolygonWarning, match="5"):
        ids, skipped = rasterize_ids([tiny, square(1, 2, 2, 4, 4)], G8, return_skipped=True)
    assert skipped == [5] and set(np.unique(ids)) == {0, 1}


def test_boundary_six_by_six_square():
    b = rasterize_boundary([square(1, 1, 1, 7, 7)], G8, thickness=2)
    expected = np.zeros((8, 8), dtype=np.uint8)
    expected[1:7, 1:7] = 1
    expected[3:5, 3:5] = 0
    np.testing.assert_array_equal(b, expected)


def test_boundary_saturates_on_thin_field():
    b = rasterize_boundary([square(1, 1, 1, 7, 5)], G8, thickness=2)  # 4 px wide
    np.testing.assert_array_equal(b, rasterize_extent([square(1, 1, 1, 7, 5)], G8))


def test_boundary_shared_edge_on_both_sides():
    a, b = square(1, 1, 0, 7, 4), square(2, 1, 4, 7, 8)
    ring = rasterize_boundary([a, b], G8, thickness=1)
    assert ring[3, 3] == 1 and ring[3, 4] == 1


def test_boundary_rejects_bad_thickness():
    with pytest.raises(ValueError):
        rasterize_boundary([square(1, 0, 0, 4, 4)], G8, thickness=0)


@pytest.mark.parametrize("seed", range(100))
def test_boundary_matches_chebyshev_oracle_on_tilings(seed):
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(4, 33, 2))
    ids = random_tiling(rng, h, w, int(rng.integers(1, 10)))
    ids[rng.random((h, w)) < 0.05] = 0
    np.testing.assert_array_equal(labels_from_ids(ids, 2).boundary, ring_by_chebyshev(ids, 2))


def test_distance_five_by_five_square():
    d = rasterize_distance([square(1, 1, 1, 6, 6)], G8)
    assert d[3, 3] == 1.0
    assert d[1, 1] == pytest.approx(1 / 3)
    inside = d[1:6, 1:6]
    assert inside.min() == d[1, 1]
    assert d[0].sum() == 0


def test_distance_no_polygons():
    assert rasterize_distance([], G8).sum() == 0


def test_distance_normalised_per_field():
    d = rasterize_distance([square(1, 0, 0, 3, 3), square(2, 3, 3, 8, 8)], G8)
    assert d[:3, :3].max() == 1.0 and d[3:, 3:].max() == 1.0


def test_distance_single_pixel_field_is_one():
    ids = np.zeros((5, 5), dtype=int)
    ids[2, 2] = 4
    assert distance_from_ids(ids)[2, 2] == 1.0


@pytest.mark.parametrize("seed", range(100))
def test_distance_matches_brute_force(seed):
    rng = np.random.default_rng(1000 + seed)
    h, w = (int(v) for v in rng.integers(3, 25, 2))
    ids = random_tiling(rng, h, w, int(rng.integers(1, 7)))
    ids[rng.random((h, w)) < 0.1] = 0
    np.testing.assert_array_equal(distance_from_ids(ids), distance_by_brute_force(ids))


def test_mask_contains_extent_and_boundary(rng):
    ids = random_tiling(rng, 20, 20, 5)
    ids[ids == 3] = 0
    st_ = labels_from_ids(ids, 2, 2)
    assert np.all(st_.mask >= st_.extent) and np.all(st_.mask >= st_.boundary)


def test_mask_is_dilated_union():
    g = GridGeometry(256, 256)
    rng = np.random.default_rng(5)
    polys = []
    for i in range(5):
        r, c = rng.integers(0, 240, 2)
        polys.append(FieldPolygon(i + 1, g.pixel_box(int(r), int(c), int(r) + 10, int(c) + 12)))
    mask = build_mask(polys, g, dilation=2)
    ext = rasterize_extent(polys, g).astype(bool)
    # brute force: pixels within Chebyshev distance 2 of any extent pixel
    rr, cc = np.nonzero(ext)
    expected = np.zeros_like(ext)
    for dr in range(-2, 3):
        for dc in range(-2, 3):
            r2, c2 = rr + dr, cc + dc
            ok = (r2 >= 0) & (r2 < 256) & (c2 >= 0) & (c2 < 256)
            expected[r2[ok], c2[ok]] = True
    np.testing.assert_array_equal(mask.astype(bool), expected)


def test_mask_empty_is_flagged():
    with pytest.warns(UnsupervisableTileWarning):
        m = build_mask([], G8)
    assert m.sum() == 0


def test_mask_coverage_of_full_tiling():
    ids = np.ones((6, 6), dtype=int)
    ids[:, 3:] = 2
    st_ = labels_from_ids(ids, 2, 2)
    assert mask_coverage(st_.mask) == 1.0
    assert mask_coverage(labels_from_ids(np.zeros((4, 4), int)).mask) == 0.0


def test_label_stack_invariants(rng):
    ids = random_tiling(rng, 24, 24, 6)
    ids[ids == 2] = 0
    st_ = labels_from_ids(ids)
    assert np.all((st_.distance > 0) == (st_.extent == 1))
    assert np.all(st_.boundary <= st_.extent)
    for f in np.unique(ids[ids > 0]):
        assert st_.distance[ids == f].max() == 1.0
    arr = st_.as_array()
    assert arr.shape == (4, 24, 24) and arr.dtype == np.float32
    back = LabelStack.from_array(arr)
    np.testing.assert_array_equal(back.boundary, st_.boundary)


def test_rasterize_labels_matches_components():
    polys = [square(1, 0, 0, 4, 8), square(2, 4, 0, 8, 8)]
    st_ = rasterize_labels(polys, G8)
    np.testing.assert_array_equal(st_.extent, rasterize_extent(polys, G8))
    np.testing.assert_array_equal(st_.boundary, rasterize_boundary(polys, G8))


def test_vectorize_rectangle_is_four_corners():
    inst = np.zeros((8, 8), dtype=int)
    inst[2:5, 1:7] = 1
    polys = vectorize_instances(inst, G8)
    assert len(polys) == 1 and len(polys[0].ring) == 4
    assert polys[0].area == 18.0


def test_vectorize_keeps_hole():
    inst = np.zeros((8, 8), dtype=int)
    inst[1:7, 1:7] = 1
    inst[3:5, 3:5] = 0
    (p,) = vectorize_instances(inst, G8)
    assert len(p.holes) == 1
    # the hole ring encloses exactly the four zero pixels (complement flood-fill)
    hole = FieldPolygon(9, p.holes[0])
    assert hole.area == 4.0
    np.testing.assert_array_equal(rasterize_ids([p], G8), inst)


def test_vectorize_empty_map():
    assert vectorize_instances(np.zeros((8, 8), dtype=int), G8) == []


def test_vectorize_warns_on_missing_id():
    inst = np.zeros((4, 4), dtype=int)
    inst[0, 0] = 2
    with pytest.warns(EmptyInstanceWarning):
        polys = vectorize_instances(inst, GridGeometry(4, 4))
    assert [p.id for p in polys] == [2]


@given(st.integers(0, 2 ** 31 - 1))
def test_round_trip_vectorize_rasterize(seed):
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(2, 24, 2))
    g = GridGeometry(h, w, float(rng.choice([1.0, 4.8, 10.0])), (100.0, 200.0))
    inst = random_tiling(rng, h, w, int(rng.integers(1, 8)))
    inst[rng.random((h, w)) < 0.1] = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        polys = vectorize_instances(inst, g)
        back = rasterize_ids(polys, g)
    np.testing.assert_array_equal(back, inst)


def test_raster_grid_validation():
    with pytest.raises(ValueError):
        RasterGrid(np.zeros((2, 2, 1)), pixel_size=0)
    r = RasterGrid(np.zeros((3, 4, 2)), 2.0, (1.0, 9.0))
    assert r.geometry.shape == (3, 4) and r.channels == 2
