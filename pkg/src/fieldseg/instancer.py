"""Field instances from extent / boundary probabilities by hierarchical watershed.

The flooding surface is ``mix * boundary + (1 - mix) * (1 - extent)``. Markers are the 4-connected components of ``surface < marker_threshold``; flooding is
restricted to ``extent >= extent_cutoff``. While basins grow they merge
whenever the weaker one (dynamics: depth below the contact level; area: pixel
count) is below ``merge_threshold``. Instances smaller than
``min_instance_px`` are merged into the neighbour with the lowest shared
boundary, or dropped when isolated.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage as ndi
from skimage.measure import label as cc_label

from . import kernels
from .evalkit import aggregate_instances, per_field_ious

CRITERIA = {"dynamics": kernels.DYNAMICS, "area": kernels.AREA, "none": kernels.NO_MERGE}
FOUR = ndi.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class WatershedParams:
    surface_mix: float = 0.5
    marker_threshold: float = 0.3
    hierarchy_criterion: str = "dynamics"
    merge_threshold: float = 0.05
    min_instance_px: int = 4
    extent_cutoff: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.surface_mix <= 1.0:
            raise ValueError("surface_mix must lie in [0, 1]")
        for name in ("marker_threshold", "extent_cutoff"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.hierarchy_criterion not in CRITERIA:
            raise ValueError(f"hierarchy_criterion must be one of {sorted(CRITERIA)}")
        if self.merge_threshold < 0:
            raise ValueError("merge_threshold must be >= 0")
        if self.min_instance_px < 0:
            raise ValueError("min_instance_px must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WatershedParams":
        return cls(**json.loads(text))


@dataclass
class InstanceMap:
    labels: np.ndarray

    @property
    def n_instances(self) -> int:
        return int(self.labels.max(initial=0))


def relabel(labels: np.ndarray) -> np.ndarray:
    """Split ids into 4-connected parts and number them 1..n in raster order."""
    return cc_label(labels, background=0, connectivity=1).astype(np.int32)


def _adjacent_pairs(labels: np.ndarray, surface: np.ndarray):
    """(a, b, height) for every 4-adjacent pixel pair with different non-zero ids."""
    out_a, out_b, out_h = [], [], []
    for la, lb, sa, sb in ((labels[:, :-1], labels[:, 1:], surface[:, :-1], surface[:, 1:]),
                           (labels[:-1, :], labels[1:, :], surface[:-1, :], surface[1:, :])):
        sel = (la != lb) & (la > 0) & (lb > 0)
        out_a.append(la[sel])
        out_b.append(lb[sel])
        out_h.append(np.maximum(sa[sel], sb[sel]))
    return np.concatenate(out_a), np.concatenate(out_b), np.concatenate(out_h)


def merge_small(labels: np.ndarray, surface: np.ndarray, min_px: int) -> np.ndarray:
    labels = labels.copy()
    if min_px <= 1:
        return labels
    while True:
        sizes = np.bincount(labels.ravel())
        small = [k for k in np.argsort(sizes, kind="stable") if k > 0 and 0 < sizes[k] < min_px]
        if not small:
            return labels
        k = int(small[0])
        a, b, h = _adjacent_pairs(labels, surface)
        sel_a = a == k
        sel_b = b == k
        nbr = np.concatenate([b[sel_a], a[sel_b]])
        hh = np.concatenate([h[sel_a], h[sel_b]])
        if nbr.size == 0:
            labels[labels == k] = 0
            continue
        order = np.lexsort((nbr, hh))
        labels[labels == k] = nbr[order[0]]


def flood_surface(extent: np.ndarray, boundary: np.ndarray, mix: float) -> np.ndarray:
    return mix * np.asarray(boundary, dtype=np.float64) + (1.0 - mix) * (1.0 - np.asarray(extent, dtype=np.float64))


def watershed_segment(extent: np.ndarray, boundary: np.ndarray,
                      params: WatershedParams = WatershedParams()) -> InstanceMap:
    extent = np.asarray(extent, dtype=np.float64)
    boundary = np.asarray(boundary, dtype=np.float64)
    if extent.shape != boundary.shape:
        raise ValueError("extent and boundary maps are not aligned")
    surface = flood_surface(extent, boundary, params.surface_mix)
    domain = extent >= params.extent_cutoff
    if not domain.any():
        return InstanceMap(np.zeros(extent.shape, dtype=np.int32))
    markers, n = ndi.label((surface < params.marker_threshold) & domain, structure=FOUR)
    # domain components without a marker get one at their lowest pixel
    comps, ncomp = ndi.label(domain, structure=FOUR)
    seeded = np.zeros(ncomp + 1, dtype=bool)
    seeded[np.unique(comps[markers > 0])] = True
    for comp in range(1, ncomp + 1):
        if seeded[comp]:
            continue
        idx = np.flatnonzero(comps.ravel() == comp)
        low = idx[np.argmin(surface.ravel()[idx])]
        n += 1
        markers.ravel()[low] = n
    labels = kernels.priority_flood(surface, markers, domain, CRITERIA[params.hierarchy_criterion],
                                    params.merge_threshold)
    labels = relabel(labels)
    labels = merge_small(labels, surface, params.min_instance_px)
    return InstanceMap(relabel(labels))


def apply_cropland_mask(inst: InstanceMap, cropmask: np.ndarray) -> InstanceMap:
    """Blank non-crop pixels; drop instances that lose more than half their area."""
    labels = np.asarray(inst.labels)
    cropmask = np.asarray(cropmask) != 0
    if cropmask.shape != labels.shape:
        raise ValueError("cropland mask is not aligned with the instance map")
    before = np.bincount(labels.ravel())
    masked = np.where(cropmask, labels, 0)
    after = np.bincount(masked.ravel(), minlength=len(before))
    lost = (after[: len(before)] * 2 < before) & (before > 0)
    lost[0] = False
    masked[lost[masked]] = 0
    return InstanceMap(relabel(masked))


# --------------------------------------------------------------------------
# tuning on validation predictions

@dataclass
class ValItem:
    extent: np.ndarray
    boundary: np.ndarray
    gt_ids: np.ndarray
    field_ids: Sequence[int] | None = None
    cropmask: np.ndarray | None = None


@dataclass
class TuneResult:
    params: WatershedParams
    median_iou: float
    iou50: float
    n_fields: int
    low_confidence: bool
    table: list = field(default_factory=list)


DEFAULT_GRID = {
    "surface_mix": [0.3, 0.5, 0.7],
    "marker_threshold": [0.2, 0.35, 0.5],
    "merge_threshold": [0.0, 0.05, 0.15],
    "min_instance_px": [4, 8],
    "extent_cutoff": [0.4, 0.5],
}


def expand_grid(grid) -> list[WatershedParams]:
    if isinstance(grid, dict):
        keys = sorted(grid)
        return [WatershedParams(**dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]
    return list(grid)


def segment_and_score(item: ValItem, params: WatershedParams) -> list[tuple[int, float, int]]:
    inst = watershed_segment(item.extent, item.boundary, params)
    if item.cropmask is not None:
        inst = apply_cropland_mask(inst, item.cropmask)
    return per_field_ious(item.gt_ids, inst.labels, item.field_ids)


def tune_params(items: Sequence[ValItem], search_grid=DEFAULT_GRID, min_fields: int = 10) -> TuneResult:
    """Grid search maximising median IoU over the labelled validation fields.

    Ties go to the higher IoU_50, then the smaller ``min_instance_px``, then
    the earlier grid point.
    """
    candidates = expand_grid(search_grid)
    if not candidates:
        raise ValueError("empty search grid")
    if not items:
        raise ValueError("need at least one validation item")
    table = []
    best_key, best = None, None
    for i, params in enumerate(candidates):
        ious = [t[1] for item in items for t in segment_and_score(item, params)]
        if not ious:
            raise ValueError("validation items contain no labelled fields")
        med, curve = aggregate_instances(ious)
        table.append({**asdict(params), "median_iou": med, "iou50": curve[50]})
        key = (med, curve[50], -params.min_instance_px, -i)
        if best_key is None or key > best_key:
            best_key, best = key, (params, med, curve[50], len(ious))
    params, med, i50, n = best
    return TuneResult(params, med, i50, n, n < min_fields, table)
