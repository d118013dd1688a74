"""Pixel metrics on the supervision mask and per-field instance IoU."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

UNDEFINED = float("nan")
K_GRID = tuple(range(0, 101, 5))


class UndefinedMetricWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred: np.ndarray, label: np.ndarray, mask: np.ndarray | None = None,
              threshold: float = 0.5) -> ConfusionCounts:
    """Counts over pixels with mask = 1; predictions >= threshold are positive."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"prediction {pred.shape} and label {label.shape} are not aligned")
    if mask is None:
        mask = np.ones(label.shape, dtype=bool)
    else:
        mask = np.asarray(mask) != 0
        if mask.shape != label.shape:
            raise ValueError("mask is not aligned with the label")
    if not mask.any():
        raise ValueError("empty evaluation mask")
    p = pred[mask] >= threshold
    y = label[mask] >= 0.5
    tp = int(np.count_nonzero(p & y))
    tn = int(np.count_nonzero(~p & ~y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return ConfusionCounts(tp, tn, fp, fn)


def _undefined(name: str, c: ConfusionCounts) -> float:
    warnings.warn(f"{name} undefined for {c}", UndefinedMetricWarning, stacklevel=3)
    return UNDEFINED


def oa(c: ConfusionCounts) -> float:
    if c.total == 0:
        return _undefined("OA", c)
    return (c.tp + c.tn) / c.total


def f1(c: ConfusionCounts) -> float:
    denom = c.tp + 0.5 * (c.fp + c.fn)
    if denom == 0:
        return _undefined("F1", c)
    return c.tp / denom


def mcc(c: ConfusionCounts) -> float:
    prod = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if prod == 0:
        return _undefined("MCC", c)
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(prod)


def pixel_metrics(c: ConfusionCounts) -> dict:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        return {"oa": oa(c), "f1": f1(c), "mcc": mcc(c)}


# --------------------------------------------------------------------------
# instances

def field_iou(gt_field: np.ndarray, inst: np.ndarray) -> tuple[float, int | None]:
    """IoU of one ground-truth field with the predicted instance overlapping it most.

    ``gt_field`` is a boolean raster aligned with ``inst``. Ties on overlap go to
    the larger IoU, then the smaller id. No overlap gives ``(0.0, None)``.
    """
    gt_field = np.asarray(gt_field, dtype=bool)
    inst = np.asarray(inst)
    if gt_field.shape != inst.shape:
        raise ValueError("field raster and instance map are not aligned")
    n_gt = int(np.count_nonzero(gt_field))
    if n_gt == 0:
        raise ValueError("ground-truth field has no pixels")
    under = inst[gt_field]
    under = under[under > 0]
    if under.size == 0:
        return 0.0, None
    ids, inter = np.unique(under, return_counts=True)
    sizes = np.bincount(inst.ravel(), minlength=int(ids.max()) + 1)[ids]
    ious = inter / (n_gt + sizes - inter)
    # lexsort: last key is primary
    best = np.lexsort((ids, -ious, -inter))[0]
    return float(ious[best]), int(ids[best])


def per_field_ious(gt_ids: np.ndarray, inst: np.ndarray, field_ids: Iterable[int] | None = None,
                   exclusive: bool = False) -> list[tuple[int, float, int]]:
    """(field_id, iou, area_px) for each ground-truth field in ``gt_ids``.

    With ``exclusive=True`` each predicted instance is matched to at most one
    field via maximum-IoU bipartite assignment.
    """
    gt_ids = np.asarray(gt_ids)
    inst = np.asarray(inst)
    if field_ids is None:
        field_ids = [int(v) for v in np.unique(gt_ids) if v != 0]
    field_ids = [int(f) for f in field_ids]
    areas = {f: int(np.count_nonzero(gt_ids == f)) for f in field_ids}
    field_ids = [f for f in field_ids if areas[f] > 0]
    if not exclusive:
        return [(f, field_iou(gt_ids == f, inst)[0], areas[f]) for f in field_ids]
    from scipy.optimize import linear_sum_assignment

    inst_ids = [int(v) for v in np.unique(inst) if v != 0]
    if not field_ids:
        return []
    mat = np.zeros((len(field_ids), max(len(inst_ids), 1)))
    sizes = np.bincount(inst.ravel())
    col = {k: j for j, k in enumerate(inst_ids)}
    for i, f in enumerate(field_ids):
        under = inst[gt_ids == f]
        under = under[under > 0]
        if under.size:
            ids, inter = np.unique(under, return_counts=True)
            for k, n in zip(ids, inter):
                mat[i, col[int(k)]] = n / (areas[f] + sizes[k] - n)
    rows, cols = linear_sum_assignment(-mat)
    best = dict(zip(rows, cols))
    return [(f, float(mat[i, best[i]]) if i in best else 0.0, areas[f]) for i, f in enumerate(field_ids)]


def iou_curve(ious: Sequence[float], ks: Sequence[int] = K_GRID) -> dict[int, float]:
    """Fraction of fields with IoU >= k% for each k."""
    arr = np.asarray(ious, dtype=float)
    if arr.size == 0:
        return {int(k): UNDEFINED for k in ks}
    return {int(k): float(np.count_nonzero(arr >= k / 100.0)) / arr.size for k in ks}


def aggregate_instances(ious: Sequence[float], ks: Sequence[int] = K_GRID) -> tuple[float, dict[int, float]]:
    arr = np.asarray(ious, dtype=float)
    if arr.size == 0:
        raise ValueError("no fields to aggregate")
    return float(np.median(arr)), iou_curve(arr, ks)


# --------------------------------------------------------------------------
# reports

@dataclass
class ImageResult:
    image_id: str
    counts: ConfusionCounts
    field_ious: list = field(default_factory=list)


@dataclass
class EvalReport:
    oa: float
    f1: float
    mcc: float
    per_field_ious: list
    median_iou: float
    iou_k_curve: dict
    per_image: list = field(default_factory=list)
    per_image_mean: dict = field(default_factory=dict)

    @property
    def iou50(self) -> float:
        return self.iou_k_curve.get(50, UNDEFINED)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iou_k_curve"] = {str(k): v for k, v in self.iou_k_curve.items()}
        d["iou50"] = self.iou50
        return nan_to_none(d)

    def fields_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "field_id", "iou", "area_px"])
        for img in self.per_image:
            for fid, iou, area in img["field_ious"]:
                w.writerow([img["image_id"], fid, f"{iou:.6f}", area])
        return buf.getvalue()


def nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [nan_to_none(v) for v in obj]
    return obj


def build_report(results: Sequence[ImageResult]) -> EvalReport:
    """Pool pixel counts over images (and also report the per-image mean)."""
    if not results:
        raise ValueError("nothing to report")
    pooled = ConfusionCounts(0, 0, 0, 0)
    per_image = []
    per_metric = {"oa": [], "f1": [], "mcc": []}
    all_ious = []
    for r in results:
        pooled = pooled + r.counts
        m = pixel_metrics(r.counts)
        for k in per_metric:
            per_metric[k].append(m[k])
        per_image.append({"image_id": r.image_id, **asdict(r.counts), **m,
                          "field_ious": [list(t) for t in r.field_ious]})
        all_ious.extend(t for t in r.field_ious)
    pm = pixel_metrics(pooled)
    ious = [t[1] for t in all_ious]
    if ious:
        med, curve = aggregate_instances(ious)
    else:
        med, curve = UNDEFINED, iou_curve([])
    means = {k: float(np.nanmean(v)) if not all(math.isnan(x) for x in v) else UNDEFINED
             for k, v in per_metric.items()}
    return EvalReport(pm["oa"], pm["f1"], pm["mcc"], [list(t) for t in all_ious], med, curve, per_image, means)
