"""Dataset assembly: block splits, partial labels, downsampling, augmentation, batching."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .geometry import FieldPolygon, RasterGrid, labels_from_ids, rasterize_ids

SPLITS = ("train", "val", "test")


# --------------------------------------------------------------------------
# geographic block splits

@dataclass
class SplitAssignment:
    grid_shape: tuple[int, int]
    cell_to_split: dict[tuple[int, int], str]
    fractions: tuple[float, float, float]
    bounds: tuple[float, float, float, float]
    scene_cells: list[tuple[int, int]] = field(default_factory=list)

    def cell_of(self, location) -> tuple[int, int]:
        x0, y0, x1, y1 = self.bounds
        rows, cols = self.grid_shape
        c = int(np.clip((location[0] - x0) / max(x1 - x0, 1e-12) * cols, 0, cols - 1))
        r = int(np.clip((location[1] - y0) / max(y1 - y0, 1e-12) * rows, 0, rows - 1))
        return (r, c)

    def split_of(self, location) -> str:
        return self.cell_to_split[self.cell_of(location)]

    @property
    def scene_splits(self) -> list[str]:
        return [self.cell_to_split[c] for c in self.scene_cells]

    def realized_fractions(self) -> tuple[float, float, float]:
        n = len(self.cell_to_split)
        vals = list(self.cell_to_split.values())
        return tuple(vals.count(s) / n for s in SPLITS)

    def to_json(self) -> str:
        return json.dumps({
            "grid_shape": list(self.grid_shape),
            "fractions": list(self.fractions),
            "bounds": list(self.bounds),
            "cells": [[r, c, s] for (r, c), s in sorted(self.cell_to_split.items())],
            "scene_cells": [list(c) for c in self.scene_cells],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        d = json.loads(text)
        return cls(tuple(d["grid_shape"]), {(r, c): s for r, c, s in d["cells"]}, tuple(d["fractions"]),
                   tuple(d["bounds"]), [tuple(c) for c in d["scene_cells"]])


def assign_splits(scene_locations, grid_shape=(20, 20), fractions=(0.64, 0.16, 0.20), seed: int = 0,
                  bounds=None) -> SplitAssignment:
    """Randomly assign grid cells to train/val/test; scenes inherit their cell's split."""
    locs = np.asarray(scene_locations, dtype=float).reshape(-1, 2)
    if len(locs) == 0:
        raise ValueError("empty region: need at least one scene location")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rows, cols = grid_shape
    if rows < 1 or cols < 1:
        raise ValueError("grid_shape must be positive")
    if bounds is None:
        bounds = (locs[:, 0].min(), locs[:, 1].min(), locs[:, 0].max(), locs[:, 1].max())
    n = rows * cols
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    split_of_rank = np.array(["test"] * n, dtype=object)
    split_of_rank[:n_train] = "train"
    split_of_rank[n_train:n_train + n_val] = "val"
    cell_to_split = {}
    for rank, cell in enumerate(order):
        cell_to_split[(int(cell // cols), int(cell % cols))] = str(split_of_rank[rank])
    sa = SplitAssignment((rows, cols), cell_to_split, fractions, tuple(float(b) for b in bounds))
    sa.scene_cells = [sa.cell_of(loc) for loc in locs]
    return sa


# --------------------------------------------------------------------------
# labelling budget and partial labels

@dataclass(frozen=True)
class LabelBudget:
    total_fields: int
    fields_per_image: int

    def __post_init__(self):
        if self.fields_per_image < 1:
            raise ValueError("fields_per_image must be >= 1")
        if self.total_fields % self.fields_per_image:
            raise ValueError(f"budget {self.total_fields} is not divisible by {self.fields_per_image} fields per image")

    @property
    def n_images(self) -> int:
        return self.total_fields // self.fields_per_image


def _centroids(polys: Sequence[FieldPolygon]) -> np.ndarray:
    return np.array([p.ring.mean(axis=0) for p in polys]).reshape(-1, 2)


def sample_partial_labels(polygons: Sequence[FieldPolygon], fields_per_image: int, seed: int,
                          n_subsets: int = 1, mode: str = "anchor") -> list[list[FieldPolygon]]:
    """Draw ``n_subsets`` disjoint field subsets of size ``fields_per_image``.

    ``mode="anchor"`` picks a uniformly random remaining field and takes the
    ``fields_per_image`` remaining fields whose centroids are closest to it;
    ``mode="uniform"`` samples without replacement. Returns fewer subsets (and
    warns) when the scene runs out of fields.
    """
    if mode not in ("anchor", "uniform"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if fields_per_image < 1:
        raise ValueError("fields_per_image must be >= 1")
    rng = np.random.default_rng(seed)
    remaining = list(range(len(polygons)))
    cents = _centroids(polygons)
    out = []
    for _ in range(n_subsets):
        if len(remaining) < fields_per_image:
            warnings.warn(f"only {len(remaining)} fields left, {fields_per_image} needed; subset skipped",
                          stacklevel=2)
            break
        rem = np.asarray(remaining)
        if mode == "uniform":
            pick = rng.choice(rem, size=fields_per_image, replace=False)
        else:
            anchor = cents[rem[rng.integers(len(rem))]]
            d = np.hypot(*(cents[rem] - anchor).T)
            pick = rem[np.argsort(d, kind="stable")[:fields_per_image]]
        chosen = set(int(i) for i in pick)
        out.append([polygons[i] for i in sorted(chosen)])
        remaining = [i for i in remaining if i not in chosen]
    return out


# --------------------------------------------------------------------------
# resolution and augmentation

def downsample_imagery(grid: RasterGrid, factor: int) -> RasterGrid:
    """Block-mean downsampling; crops to the largest divisible window first."""
    if int(factor) != factor or factor <= 0:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return RasterGrid(grid.data.copy(), grid.pixel_size, grid.origin, list(grid.band_names))
    h, w, c = grid.data.shape
    h2, w2 = (h // factor) * factor, (w // factor) * factor
    if h2 == 0 or w2 == 0:
        raise ValueError(f"raster {h}x{w} is smaller than the factor {factor}")
    if (h2, w2) != (h, w):
        warnings.warn(f"cropped {h}x{w} to {h2}x{w2} to divide by {factor}", stacklevel=2)
    data = grid.data[:h2, :w2].astype(np.float64)
    blocks = data.reshape(h2 // factor, factor, w2 // factor, factor, c).mean(axis=(1, 3))
    return RasterGrid(blocks.astype(grid.data.dtype), grid.pixel_size * factor, grid.origin,
                      list(grid.band_names))


def transform(arr: np.ndarray, rot: int, flip_h: bool, flip_v: bool) -> np.ndarray:
    """Rotate by ``rot`` quarter turns then flip, over the last two axes."""
    out = np.rot90(arr, k=rot, axes=(-2, -1))
    if flip_h:
        out = out[..., ::-1]
    if flip_v:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def draw_transform(rng: np.random.Generator) -> tuple[int, bool, bool]:
    return int(rng.integers(4)), bool(rng.integers(2)), bool(rng.integers(2))


def augment(image: np.ndarray, labels: np.ndarray, seed=None, rng=None):
    """Apply one random 90-degree rotation / flip draw to image (C,H,W) and labels (4,H,W)."""
    if image.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"image {image.shape} and labels {labels.shape} are not aligned")
    rng = rng if rng is not None else np.random.default_rng(seed)
    t = draw_transform(rng)
    return transform(image, *t), transform(labels, *t)


def make_multitemporal_input(seasons: Sequence[np.ndarray], mode: str = "separate",
                             shuffle: bool = False, rng=None) -> list[np.ndarray]:
    """Per-season (C,H,W) arrays to model inputs.

    ``separate`` returns one input per season; ``stacked`` one input with the
    seasons concatenated on channels (optionally in a random order).
    """
    if len(seasons) < 1:
        raise ValueError("need at least one season")
    if mode == "separate":
        return [np.asarray(s) for s in seasons]
    if mode == "stacked":
        order = np.arange(len(seasons))
        if shuffle:
            rng = rng if rng is not None else np.random.default_rng()
            order = rng.permutation(len(seasons))
        return [np.concatenate([np.asarray(seasons[i]) for i in order], axis=0)]
    raise ValueError(f"unknown mode {mode!r}; use 'separate' or 'stacked'")


# --------------------------------------------------------------------------
# samples and batching

@dataclass
class Sample:
    """One labelled image: per-season imagery (C,H,W) and labels (4,H,W)."""

    scene_id: str
    seasons: list[np.ndarray]
    labels: np.ndarray
    split: str = "train"
    n_labeled: int = 0
    noncrop: np.ndarray | None = None
    field_ids: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape[-2:]


@dataclass
class SampleRecord:
    scene_id: str
    crop_window: tuple[int, int, int, int]
    imagery_ref: list[str]
    labelstack_ref: str
    split: str
    months: list[int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_manifest(path, records: Sequence[SampleRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(r.to_json() + "\n" for r in records))


def read_manifest(path) -> list[SampleRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            d["crop_window"] = tuple(d["crop_window"])
            out.append(SampleRecord(**d))
    return out


def image_of(raster: RasterGrid) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(raster.data, 2, 0), dtype=np.float32)


def sample_from_scene(scene, labeled: Sequence[FieldPolygon] | None = None, *, factor: int = 1,
                      split: str = "train", thickness: int = 2, dilation: int = 2,
                      seasons: Sequence[int] | None = None) -> Sample:
    """Build a training/eval sample, re-rasterising labels from vectors at the working grid."""
    imagery = scene.imagery if seasons is None else [scene.imagery[i] for i in seasons]
    if factor != 1:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            imagery = [downsample_imagery(g, factor) for g in imagery]
    grid = imagery[0].geometry
    labeled = scene.polygons if labeled is None else labeled
    all_ids = rasterize_ids(scene.polygons, grid)
    if labeled is scene.polygons:
        ids = all_ids
    else:
        ids = rasterize_ids(list(labeled), grid)
    stack = labels_from_ids(ids, thickness, dilation)
    return Sample(scene.scene_id, [image_of(g) for g in imagery], stack.as_array(), split, len(labeled),
                  (all_ids == 0).astype(np.uint8), all_ids)


def _crop_origin(rng, sample: Sample, crop: int, tries: int = 20) -> tuple[int, int]:
    h, w = sample.shape
    if crop >= h and crop >= w:
        return 0, 0
    mask = sample.labels[3]
    r = c = 0
    for _ in range(tries):
        r = int(rng.integers(h - crop + 1))
        c = int(rng.integers(w - crop + 1))
        if mask[r:r + crop, c:c + crop].any():
            break
    return r, c


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch)])


def iterate_batches(samples: Sequence[Sample], batch_size: int, *, crop: int | None, seed: int, epoch: int,
                    steps: int | None = None, augment_data: bool = True, input_mode: str = "separate",
                    shuffle_seasons: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Deterministic batches for ``(seed, epoch)``.

    Samples are visited in a shuffled order (cycled when ``steps`` asks for
    more batches than one pass gives); crop windows and augmentation are drawn
    fresh every epoch. ``input_mode="separate"`` picks one random season per
    draw, ``"stacked"`` concatenates all seasons.
    """
    if not samples:
        raise ValueError("no samples to iterate")
    rng = epoch_rng(seed, epoch)
    n = len(samples)
    if steps is None:
        steps = max(1, int(np.ceil(n / batch_size)))
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        xs, ys = [], []
        for _ in range(batch_size):
            if pos == len(order):
                order = rng.permutation(n)
                pos = 0
            s = samples[order[pos]]
            pos += 1
            if input_mode == "separate":
                img = s.seasons[int(rng.integers(len(s.seasons)))]
            else:
                img = make_multitemporal_input(s.seasons, "stacked", shuffle_seasons, rng)[0]
            lab = s.labels
            if crop is not None:
                r, c = _crop_origin(rng, s, crop)
                img = img[:, r:r + crop, c:c + crop]
                lab = lab[:, r:r + crop, c:c + crop]
            if augment_data:
                img, lab = augment(img, lab, rng=rng)
            xs.append(img)
            ys.append(lab)
        yield np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float32)
