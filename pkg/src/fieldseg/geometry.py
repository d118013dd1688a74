"""Field polygons to label rasters and back.

Grids are north-up: ``origin`` is the world (x, y) of the top-left corner, and
pixel (row, col) has its centre at ``(x0 + (col + .5) * ps, y0 - (row + .5) * ps)``.
A pixel belongs to a polygon when its centre is inside (even-odd rule, holes
respected). Outside the grid counts as "not this field" for the boundary ring
and the distance label, so a field clipped by the grid edge gets a ring there.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage as ndi

from . import kernels


class DegeneratePolygonWarning(UserWarning):
    pass


class EmptyInstanceWarning(UserWarning):
    pass


class UnsupervisableTileWarning(UserWarning):
    pass


def _as_ring(coords) -> np.ndarray:
    ring = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    return ring


def _shoelace(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True, eq=False)
class FieldPolygon:
    """One labelled field. ``ring`` is the exterior, ``holes`` optional interiors."""

    id: int
    ring: np.ndarray
    crs_tag: str = "local"
    holes: tuple = ()

    def __post_init__(self):
        ring = _as_ring(self.ring)
        if len(ring) < 3:
            raise ValueError(f"field {self.id}: a ring needs at least 3 vertices")
        object.__setattr__(self, "ring", ring)
        object.__setattr__(self, "holes", tuple(_as_ring(h) for h in self.holes))
        if int(self.id) < 1:
            raise ValueError(f"field ids must be >= 1, got {self.id}")

    @property
    def area(self) -> float:
        return abs(_shoelace(self.ring)) - sum(abs(_shoelace(h)) for h in self.holes)

    def bounds(self) -> tuple[float, float, float, float]:
        return (float(self.ring[:, 0].min()), float(self.ring[:, 1].min()),
                float(self.ring[:, 0].max()), float(self.ring[:, 1].max()))

    def to_shapely(self):
        from shapely.geometry import Polygon

        return Polygon(self.ring, [h for h in self.holes])

    def is_valid(self) -> bool:
        return self.area > 0 and self.to_shapely().is_valid


@dataclass(frozen=True)
class GridGeometry:
    height: int
    width: int
    pixel_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid needs H, W >= 1")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def geometry(self) -> "GridGeometry":
        return self

    def to_pixel(self, xy: np.ndarray) -> np.ndarray:
        """World (x, y) to fractional (col, row)."""
        xy = np.asarray(xy, dtype=np.float64)
        col = (xy[..., 0] - self.origin[0]) / self.pixel_size
        row = (self.origin[1] - xy[..., 1]) / self.pixel_size
        return np.stack([col, row], axis=-1)

    def to_world(self, colrow: np.ndarray) -> np.ndarray:
        colrow = np.asarray(colrow, dtype=np.float64)
        x = self.origin[0] + colrow[..., 0] * self.pixel_size
        y = self.origin[1] - colrow[..., 1] * self.pixel_size
        return np.stack([x, y], axis=-1)

    def pixel_box(self, r0: int, c0: int, r1: int, c1: int) -> np.ndarray:
        """World ring covering pixel rows r0..r1-1 and cols c0..c1-1."""
        return self.to_world(np.array([[c0, r0], [c1, r0], [c1, r1], [c0, r1]], dtype=float))

    def resampled(self, factor: int) -> "GridGeometry":
        return GridGeometry(self.height // factor, self.width // factor,
                            self.pixel_size * factor, self.origin)


@dataclass
class RasterGrid:
    """H x W x C raster with its georeferencing."""

    data: np.ndarray
    pixel_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    band_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"raster data must be H x W x C with positive sizes, got {self.data.shape}")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")
        if not self.band_names:
            self.band_names = [f"b{i}" for i in range(self.data.shape[2])]
        if len(self.band_names) != self.data.shape[2]:
            raise ValueError("one band name per channel")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def geometry(self) -> GridGeometry:
        h, w, _ = self.data.shape
        return GridGeometry(h, w, float(self.pixel_size), self.origin)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelStack:
    extent: np.ndarray
    boundary: np.ndarray
    distance: np.ndarray
    mask: np.ndarray

    def as_array(self) -> np.ndarray:
        """4 x H x W float32 (extent, boundary, distance, mask)."""
        return np.stack([self.extent, self.boundary, self.distance, self.mask]).astype(np.float32)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "LabelStack":
        return cls(arr[0], arr[1], arr[2], arr[3])


# --------------------------------------------------------------------------

def _geom(grid) -> GridGeometry:
    return grid.geometry


def rasterize_ids(polys: Sequence[FieldPolygon], grid, *, return_skipped: bool = False):
    """Integer raster of field ids (0 = no field). Later polygons win overlaps.

    Polygons smaller than one pixel in area are skipped with a
    :class:`DegeneratePolygonWarning`.
    """
    g = _geom(grid)
    out = np.zeros(g.shape, dtype=np.int64)
    skipped = []
    # relative slack so a one-pixel square in world units is not lost to rounding
    min_area = g.pixel_size ** 2 * (1.0 - 1e-9)
    for poly in polys:
        if poly.area < min_area:
            skipped.append(poly.id)
            continue
        rings = [poly.ring, *poly.holes]
        pix = [g.to_pixel(r) for r in rings]
        allpix = np.concatenate(pix)
        c0 = max(int(np.floor(allpix[:, 0].min() - 0.5)), 0)
        c1 = min(int(np.ceil(allpix[:, 0].max() + 0.5)), g.width)
        r0 = max(int(np.floor(allpix[:, 1].min() - 0.5)), 0)
        r1 = min(int(np.ceil(allpix[:, 1].max() + 0.5)), g.height)
        if r1 <= r0 or c1 <= c0:
            continue
        offsets = np.cumsum([0] + [len(p) for p in pix])
        cover = kernels.polygon_cover(allpix[:, 0], allpix[:, 1], offsets, r0, r1, c0, c1)
        out[r0:r1, c0:c1][cover] = poly.id
    if skipped:
        warnings.warn(f"skipped degenerate polygons (area < one pixel): {skipped}",
                      DegeneratePolygonWarning, stacklevel=2)
    if return_skipped:
        return out, skipped
    return out


def rasterize_extent(polys: Sequence[FieldPolygon], grid) -> np.ndarray:
    return (rasterize_ids(polys, grid) > 0).astype(np.uint8)


def boundary_from_ids(ids: np.ndarray, thickness: int = 2) -> np.ndarray:
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    return kernels.interior_ring(ids, thickness).astype(np.uint8)


def rasterize_boundary(polys: Sequence[FieldPolygon], grid, thickness: int = 2) -> np.ndarray:
    """Interior-side ring of every field, ``thickness`` pixels wide (Chebyshev)."""
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    return boundary_from_ids(rasterize_ids(polys, grid), thickness)


def distance_from_ids(ids: np.ndarray) -> np.ndarray:
    """Per-field Euclidean distance to the nearest non-field pixel centre, max-normalised."""
    out = np.zeros(ids.shape, dtype=np.float64)
    objects = ndi.find_objects(ids)
    for idx, sl in enumerate(objects, start=1):
        if sl is None:
            continue
        inside = np.pad(ids[sl] == idx, 1)
        dist = ndi.distance_transform_edt(inside)[1:-1, 1:-1]
        peak = dist.max()
        region = ids[sl] == idx
        out[sl][region] = dist[region] / peak
    return out


def rasterize_distance(polys: Sequence[FieldPolygon], grid) -> np.ndarray:
    return distance_from_ids(rasterize_ids(polys, grid))


def mask_from_ids(ids: np.ndarray, dilation: int = 2) -> np.ndarray:
    fg = ids > 0
    if dilation > 0 and fg.any():
        fg = ndi.binary_dilation(fg, structure=np.ones((2 * dilation + 1,) * 2, dtype=bool))
    return fg.astype(np.uint8)


def build_mask(polys: Sequence[FieldPolygon], grid, dilation: int = 2) -> np.ndarray:
    """Supervision mask: labelled fields (extent and ring) dilated by ``dilation`` px."""
    if dilation < 0:
        raise ValueError("dilation must be >= 0")
    if not polys:
        warnings.warn("no labelled polygons: unsupervisable tile", UnsupervisableTileWarning,
                      stacklevel=2)
        return np.zeros(_geom(grid).shape, dtype=np.uint8)
    return mask_from_ids(rasterize_ids(polys, grid), dilation)


def mask_coverage(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size


def labels_from_ids(ids: np.ndarray, thickness: int = 2, dilation: int = 2) -> LabelStack:
    """Four label planes from an id raster (0 = no field)."""
    ids = np.asarray(ids, dtype=np.int64)
    return LabelStack(
        extent=(ids > 0).astype(np.uint8),
        boundary=boundary_from_ids(ids, thickness),
        distance=distance_from_ids(ids),
        mask=mask_from_ids(ids, dilation),
    )


def rasterize_labels(polys: Sequence[FieldPolygon], grid, thickness: int = 2,
                     dilation: int = 2) -> LabelStack:
    return labels_from_ids(rasterize_ids(polys, grid), thickness, dilation)


# --------------------------------------------------------------------------

def _region_to_shapes(region: np.ndarray):
    """Union of pixel squares of a boolean region, in (col, row) pixel units."""
    from shapely.geometry import box
    from shapely.ops import unary_union

    boxes = []
    for r in np.flatnonzero(region.any(axis=1)):
        row = region[r].astype(np.int8)
        edges = np.diff(np.concatenate([[0], row, [0]]))
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1)
        boxes.extend(box(s, r, e, r + 1) for s, e in zip(starts, stops))
    merged = unary_union(boxes)
    return list(getattr(merged, "geoms", [merged]))


def vectorize_instances(inst: np.ndarray, grid, crs_tag: str = "local") -> list[FieldPolygon]:
    """One polygon per instance id tracing its pixel outline (holes kept).

    An id whose pixels are not 4-connected yields one polygon per part.
    """
    g = _geom(grid)
    inst = np.asarray(inst)
    if inst.shape != g.shape:
        raise ValueError(f"instance map {inst.shape} does not match grid {g.shape}")
    out: list[FieldPolygon] = []
    n = int(inst.max(initial=0))
    objects = ndi.find_objects(inst.astype(np.int64)) if n else []
    empty = []
    for idx in range(1, n + 1):
        sl = objects[idx - 1] if idx - 1 < len(objects) else None
        if sl is None:
            empty.append(idx)
            continue
        r_off, c_off = sl[0].start, sl[1].start
        for shape in _region_to_shapes(inst[sl] == idx):
            shape = shape.simplify(0)
            ext = np.asarray(shape.exterior.coords) + (c_off, r_off)
            holes = [np.asarray(h.coords) + (c_off, r_off) for h in shape.interiors]
            out.append(FieldPolygon(idx, g.to_world(ext), crs_tag, tuple(g.to_world(h) for h in holes)))
    if empty:
        warnings.warn(f"instance ids with zero pixels skipped: {empty}", EmptyInstanceWarning,
                      stacklevel=2)
    return out


def pixel_footprints(polys: Iterable[FieldPolygon], grid) -> dict[int, np.ndarray]:
    """Map field id -> flat pixel indices covered in ``grid`` (overlaps: last wins)."""
    ids = rasterize_ids(list(polys), grid)
    flat = ids.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_ids = flat[order]
    keys, starts = np.unique(sorted_ids, return_index=True)
    bounds = list(starts[1:]) + [len(flat)]
    return {int(k): order[s:e] for k, s, e in zip(keys, starts, bounds) if k != 0}
