"""Desk-scale experiment scenarios on synthetic domains.

Each scenario is split into independent cells (one configuration x seed).
Cells return plain dicts of metrics and are aggregated in a fixed order, so
a rerun from the same config writes byte-identical CSV and JSON reports.
Published reference values are carried along as annotated lines; they come
from real imagery and are not targets for these synthetic runs.
"""
from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import logging
import math
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datakit import Sample, assign_splits, sample_from_scene, sample_partial_labels
from .evalkit import aggregate_instances, nan_to_none, per_field_ious, pixel_metrics
from .instancer import ValItem, WatershedParams, tune_params, watershed_segment
from .io import dump_json
from .network import Checkpoint, NetworkSpec
from .synthland import LandscapeSpec, domain_preset, generate_domain, render_low_contrast_variant
from .training import TrainConfig, evaluate_extent, finetune, predict_sample, train

log = logging.getLogger(__name__)

SCENARIOS = ("budget_study", "transfer_matrix", "label_efficiency", "temporal_mode")
REFERENCE_NOTE = "published, real data; not a target"

# published reference values (real imagery)
PUBLISHED_REFERENCES = {
    "budget_study": [
        {"n_images": 125, "fields_per_image": 80, "test_mcc": 0.563},
        {"n_images": 5000, "fields_per_image": 2, "test_mcc": 0.601},
    ],
    "transfer_matrix": [
        {"config": "source_original", "target_mcc": 0.29},
        {"config": "source_downsampled", "target_mcc": 0.50},
        {"config": "finetune", "target_median_iou": 0.86},
        {"config": "source_downsampled", "target_median_iou": 0.68},
    ],
    "label_efficiency": [
        {"target_labels": 100, "finetune_mcc": 0.60, "scratch_mcc": 0.36},
    ],
    "temporal_mode": [
        {"mode": "stacked", "test_mcc": 0.64},
        {"mode": "consensus", "test_mcc": 0.62},
    ],
}

SMALL_TUNING_GRID = {
    "surface_mix": [0.5, 0.7],
    "marker_threshold": [0.2, 0.35],
    "merge_threshold": [0.05],
    "min_instance_px": [4],
    "extent_cutoff": [0.5],
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# --------------------------------------------------------------------------
# configuration

@dataclass
class DomainConfig:
    preset: str = "target-small"
    overrides: dict = field(default_factory=dict)
    n_scenes: int = 120
    seed: int = 0

    def spec(self) -> LandscapeSpec:
        over = dict(self.overrides)
        for key in ("extent_px", "size_lognormal"):
            if key in over:
                over[key] = tuple(over[key])
        return domain_preset(self.preset, seed=self.seed, **over)


@dataclass
class ExperimentConfig:
    name: str
    scenario: str
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs"
    target: DomainConfig = field(default_factory=DomainConfig)
    source: DomainConfig | None = None
    network: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    # budget_study: [n_images, fields_per_image] pairs with a constant product
    budget_grid: list = field(default_factory=lambda: [[25, 8], [100, 2]])
    # label_efficiency: target field counts
    label_grid: list = field(default_factory=lambda: [10, 40, 160])
    fields_per_image: int = 5
    # transfer_matrix: number of fully labelled target training images (None = all)
    target_train_images: int | None = None
    downsample_factor: int | None = None
    contrast_drop: float = 0.0
    n_val_images: int | None = 24
    tuning_grid: dict = field(default_factory=lambda: dict(SMALL_TUNING_GRID))

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; valid: {', '.join(SCENARIOS)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if isinstance(self.target, dict):
            self.target = DomainConfig(**self.target)
        if isinstance(self.source, dict):
            self.source = DomainConfig(**self.source)
        if self.scenario in ("transfer_matrix", "label_efficiency") and self.source is None:
            raise ConfigError(f"scenario {self.scenario} needs a source domain")
        if self.scenario == "budget_study":
            if not self.budget_grid:
                raise ConfigError("budget_grid must be non-empty")
            products = {int(a) * int(b) for a, b in self.budget_grid}
            if len(products) != 1:
                raise ConfigError(f"budget_grid pairs must share one product (total fields), got {sorted(products)}")
        if self.scenario == "label_efficiency" and not self.label_grid:
            raise ConfigError("label_grid must be non-empty")
        try:
            self.network_spec()
            self.train_config(0)
            self.target.spec()
            if self.source is not None:
                self.source.spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def network_spec(self, in_channels: int | None = None) -> NetworkSpec:
        d = dict(self.network)
        if in_channels is not None:
            d["in_channels"] = in_channels
        return NetworkSpec(**d)

    def train_config(self, seed: int, **changes) -> TrainConfig:
        return TrainConfig.from_dict({**self.training, "seed": int(seed), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not hold a mapping")
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# data

@functools.lru_cache(maxsize=8)
def _domain(spec_json: str, n_scenes: int, name: str):
    spec = LandscapeSpec.from_dict(json.loads(spec_json))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return tuple(generate_domain(spec, n_scenes, name=name))


def domain_scenes(dc: DomainConfig, name: str):
    return _domain(json.dumps(dc.spec().to_dict(), sort_keys=True), dc.n_scenes, name)


def split_scenes(scenes, seed: int) -> dict[str, list]:
    assignment = assign_splits([s.location for s in scenes], seed=seed, bounds=(0.0, 0.0, 100.0, 100.0))
    out = {"train": [], "val": [], "test": []}
    for scene, split in zip(scenes, assignment.scene_splits):
        out[split].append(scene)
    return out


def full_samples(scenes, split: str, factor: int = 1, seasons=None) -> list[Sample]:
    return [sample_from_scene(s, split=split, factor=factor, seasons=seasons) for s in scenes]


def auto_downsample_factor(source: LandscapeSpec, target: LandscapeSpec) -> int:
    """Integer factor that brings source field sizes in pixels closest to the target's."""
    ratio = math.sqrt(source.median_area_m2 / target.median_area_m2) * target.pixel_size / source.pixel_size
    return max(1, int(round(ratio)))


def _rng(*keys) -> np.random.Generator:
    digest = hashlib.sha256(":".join(str(k) for k in keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def partial_samples(scenes, n_images: int, fields_per_image: int, seed: int, tag: str = "") -> list[Sample]:
    """``n_images`` training samples with ``fields_per_image`` labelled fields each."""
    if n_images > len(scenes):
        raise ConfigError(f"{n_images} images requested but only {len(scenes)} training scenes exist")
    order = _rng("images", tag, seed).permutation(len(scenes))[:n_images]
    out = []
    for k, i in enumerate(order):
        scene = scenes[int(i)]
        subsets = sample_partial_labels(scene.polygons, min(fields_per_image, len(scene.polygons)),
                                        seed=int(_rng("fields", tag, seed, k).integers(2 ** 31)))
        out.append(sample_from_scene(scene, subsets[0] if subsets else [], split="train"))
    return out


def counted_samples(scenes, n_fields: int, fields_per_image: int, seed: int, tag: str = "") -> list[Sample]:
    """Training samples holding ``n_fields`` labelled fields, ``fields_per_image`` per image."""
    available = sum(len(s.polygons) for s in scenes)
    if n_fields > available:
        raise ConfigError(f"{n_fields} labelled fields requested but the training scenes hold {available}")
    order = _rng("images", tag, seed).permutation(len(scenes))
    out, left = [], n_fields
    for k, i in enumerate(order):
        if left <= 0:
            break
        scene = scenes[int(i)]
        take = min(fields_per_image, left, len(scene.polygons))
        if take == 0:
            continue
        subset = sample_partial_labels(scene.polygons, take, seed=int(_rng("fields", tag, seed, k).integers(2 ** 31)))[0]
        out.append(sample_from_scene(scene, subset, split="train"))
        left -= take
    if left > 0:
        raise ConfigError(f"could not place {n_fields} labelled fields with {fields_per_image} per image")
    return out


# --------------------------------------------------------------------------
# evaluation

def evaluate_model(ckpt: Checkpoint, val: Sequence[Sample], test: Sequence[Sample], input_mode: str,
                   tuning_grid: dict) -> dict:
    """Pixel metrics on ``test`` plus instance metrics with watershed tuned on ``val``."""
    net = ckpt.to_network()
    counts = evaluate_extent(net, test, input_mode)
    m = pixel_metrics(counts)
    items = []
    for s in val:
        p = predict_sample(net, s, input_mode)
        items.append(ValItem(p[0], p[1], s.field_ids))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        params = tune_params(items, tuning_grid).params if items else WatershedParams()
        ious = []
        for s in test:
            p = predict_sample(net, s, input_mode)
            inst = watershed_segment(p[0], p[1], params)
            ious += [t[1] for t in per_field_ious(s.field_ids, inst.labels)]
    med, curve = aggregate_instances(ious) if ious else (math.nan, {50: math.nan})
    return {"oa": m["oa"], "f1": m["f1"], "mcc": m["mcc"], "median_iou": med, "iou50": curve[50],
            "n_test_fields": len(ious), "watershed_params": asdict(params)}


def _val_subset(samples, n):
    return list(samples) if n is None else list(samples)[:n]


# --------------------------------------------------------------------------
# cells: (config, part, seed) -> metrics dict

def _budget_cell(cfg: ExperimentConfig, part: int, seed: int) -> dict:
    n_img, fpi = (int(v) for v in cfg.budget_grid[part])
    splits = split_scenes(domain_scenes(cfg.target, "target"), cfg.target.seed)
    tr = partial_samples(splits["train"], n_img, fpi, seed, "budget")
    va = _val_subset(full_samples(splits["val"], "val"), cfg.n_val_images)
    te = full_samples(splits["test"], "test")
    res = train(cfg.network_spec(), tr, va, cfg.train_config(seed))
    m = evaluate_model(res.checkpoint, va, te, "separate", cfg.tuning_grid)
    return {"n_images": n_img, "fields_per_image": fpi, "best_epoch": res.best_epoch, **m}


TRANSFER_CONFIGS = ("source_original", "source_downsampled", "finetune", "scratch")


def _source_model(cfg: ExperimentConfig, seed: int, factor: int) -> Checkpoint:
    # keyed on the source-side settings only, so scenarios sharing them reuse the model
    key = {"source": asdict(cfg.source), "network": cfg.network, "training": cfg.training,
           "n_val_images": cfg.n_val_images}
    return _source_model_cached(json.dumps(key, sort_keys=True), seed, factor)


@functools.lru_cache(maxsize=8)
def _source_model_cached(key_json: str, seed: int, factor: int) -> Checkpoint:
    key = json.loads(key_json)
    source = DomainConfig(**key["source"])
    splits = split_scenes(domain_scenes(source, "source"), source.seed)
    tr = full_samples(splits["train"], "train", factor)
    va = _val_subset(full_samples(splits["val"], "val", factor), key["n_val_images"])
    tcfg = TrainConfig.from_dict({**key["training"], "seed": int(seed)})
    return train(NetworkSpec(**key["network"]), tr, va, tcfg).checkpoint


def _factor(cfg: ExperimentConfig) -> int:
    return cfg.downsample_factor or auto_downsample_factor(cfg.source.spec(), cfg.target.spec())


def _target_data(cfg: ExperimentConfig):
    splits = split_scenes(domain_scenes(cfg.target, "target"), cfg.target.seed)
    va = _val_subset(full_samples(splits["val"], "val"), cfg.n_val_images)
    te = full_samples(splits["test"], "test")
    return splits, va, te


def _transfer_cell(cfg: ExperimentConfig, part: int, seed: int) -> dict:
    name = TRANSFER_CONFIGS[part]
    factor = _factor(cfg)
    splits, va, te = _target_data(cfg)
    n_tr = cfg.target_train_images
    tr_scenes = splits["train"] if n_tr is None else [splits["train"][int(i)] for i in
                                                      _rng("images", "transfer", seed).permutation(len(splits["train"]))[:n_tr]]
    if name == "source_original":
        ckpt = _source_model(cfg, seed, 1)
    elif name == "source_downsampled":
        ckpt = _source_model(cfg, seed, factor)
    elif name == "finetune":
        ckpt = finetune(_source_model(cfg, seed, factor), full_samples(tr_scenes, "train"), va,
                        cfg.train_config(seed)).checkpoint
    else:
        ckpt = train(cfg.network_spec(), full_samples(tr_scenes, "train"), va, cfg.train_config(seed)).checkpoint
    m = evaluate_model(ckpt, va, te, "separate", cfg.tuning_grid)
    return {"config": name, "downsample_factor": factor if name != "source_original" else 1, **m}


def _label_cell(cfg: ExperimentConfig, part: int, seed: int) -> dict:
    n_fields = int(cfg.label_grid[part // 2])
    mode = ("scratch", "finetune")[part % 2]
    splits, va, te = _target_data(cfg)
    tr = counted_samples(splits["train"], n_fields, cfg.fields_per_image, seed, "labels")
    if mode == "finetune":
        ckpt = finetune(_source_model(cfg, seed, _factor(cfg)), tr, va, cfg.train_config(seed)).checkpoint
    else:
        ckpt = train(cfg.network_spec(), tr, va, cfg.train_config(seed)).checkpoint
    m = evaluate_model(ckpt, va, te, "separate", cfg.tuning_grid)
    return {"target_labels": n_fields, "mode": mode, "n_images": len(tr), **m}


TEMPORAL_MODES = ("single_season", "consensus", "stacked", "stacked_shuffled")


def _temporal_cell(cfg: ExperimentConfig, part: int, seed: int) -> dict:
    mode = TEMPORAL_MODES[part]
    scenes = domain_scenes(cfg.target, "target")
    n_seasons = cfg.target.spec().n_seasons
    if n_seasons < 2:
        raise ConfigError("temporal_mode needs a domain with at least two seasons")
    if cfg.contrast_drop:
        scenes = [render_low_contrast_variant(s, cfg.contrast_drop) for s in scenes]
    splits = split_scenes(scenes, cfg.target.seed)
    seasons = [0] if mode == "single_season" else None
    tr = full_samples(splits["train"], "train", seasons=seasons)
    va = _val_subset(full_samples(splits["val"], "val", seasons=seasons), cfg.n_val_images)
    te = full_samples(splits["test"], "test", seasons=seasons)
    input_mode = "stacked" if mode.startswith("stacked") else "separate"
    channels = tr[0].seasons[0].shape[0] * (n_seasons if input_mode == "stacked" else 1)
    tcfg = cfg.train_config(seed, input_mode=input_mode, shuffle_seasons=mode == "stacked_shuffled")
    ckpt = train(cfg.network_spec(channels), tr, va, tcfg).checkpoint
    m = evaluate_model(ckpt, va, te, input_mode, cfg.tuning_grid)
    return {"mode": mode, **m}


CELLS: dict[str, tuple[Callable, Callable]] = {
    "budget_study": (_budget_cell, lambda c: len(c.budget_grid)),
    "transfer_matrix": (_transfer_cell, lambda c: len(TRANSFER_CONFIGS)),
    "label_efficiency": (_label_cell, lambda c: 2 * len(c.label_grid)),
    "temporal_mode": (_temporal_cell, lambda c: len(TEMPORAL_MODES)),
}


def _run_cell(cfg_json: str, part: int, seed: int) -> dict:
    import torch

    torch.set_num_threads(1)
    cfg = ExperimentConfig.from_dict(json.loads(cfg_json))
    fn = CELLS[cfg.scenario][0]
    try:
        out = fn(cfg, part, seed)
        out["status"] = "ok"
    except ConfigError:
        raise
    except Exception as exc:  # failed cells are reported, not fatal
        log.error("cell %s/%d seed %d failed:\n%s", cfg.scenario, part, seed, traceback.format_exc())
        out = {"status": f"failed: {type(exc).__name__}: {exc}"}
    return {"seed": int(seed), "part": int(part), **out}


# --------------------------------------------------------------------------
# orchestration and reports

GROUP_KEYS = {
    "budget_study": ("n_images", "fields_per_image"),
    "transfer_matrix": ("config",),
    "label_efficiency": ("target_labels", "mode"),
    "temporal_mode": ("mode",),
}
METRICS = ("oa", "f1", "mcc", "median_iou", "iou50")


def _cell_labels(cfg: ExperimentConfig, part: int) -> dict:
    if cfg.scenario == "budget_study":
        a, b = cfg.budget_grid[part]
        return {"n_images": int(a), "fields_per_image": int(b)}
    if cfg.scenario == "transfer_matrix":
        return {"config": TRANSFER_CONFIGS[part]}
    if cfg.scenario == "label_efficiency":
        return {"target_labels": int(cfg.label_grid[part // 2]), "mode": ("scratch", "finetune")[part % 2]}
    return {"mode": TEMPORAL_MODES[part]}


def run_cells(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    n_parts = CELLS[cfg.scenario][1](cfg)
    if cfg.scenario == "label_efficiency":
        _check_label_grid(cfg)
    tasks = [(p, s) for s in cfg.seeds for p in range(n_parts)]
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, [cfg_json] * len(tasks), [p for p, _ in tasks], [s for _, s in tasks]))
    else:
        results = [_run_cell(cfg_json, p, s) for p, s in tasks]
    return [{**_cell_labels(cfg, r["part"]), **r} for r in results]


def _check_label_grid(cfg: ExperimentConfig) -> None:
    splits = split_scenes(domain_scenes(cfg.target, "target"), cfg.target.seed)
    available = sum(len(s.polygons) for s in splits["train"])
    too_many = [n for n in cfg.label_grid if int(n) > available]
    if too_many:
        raise ConfigError(f"label_grid {too_many} exceeds the {available} labelled fields available")


def aggregate(cfg: ExperimentConfig, rows: list[dict]) -> list[dict]:
    """Mean and standard deviation per configuration over successful seeds."""
    keys = GROUP_KEYS[cfg.scenario]
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for gk, rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        agg = dict(zip(keys, gk))
        agg["n_seeds"] = len(ok)
        for m in METRICS:
            vals = np.array([r[m] for r in ok], dtype=float)
            vals = vals[~np.isnan(vals)]
            agg[f"{m}_mean"] = float(vals.mean()) if vals.size else math.nan
            agg[f"{m}_std"] = float(vals.std(ddof=0)) if vals.size else math.nan
        out.append(agg)
    return out


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


def rows_csv(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def label_gaps(rows: list[dict]) -> dict[int, dict[int, float]]:
    """finetune - scratch MCC per seed and label count."""
    by = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        by.setdefault(r["seed"], {}).setdefault(r["target_labels"], {})[r["mode"]] = r["mcc"]
    return {seed: {n: d["finetune"] - d["scratch"] for n, d in sorted(counts.items()) if len(d) == 2}
            for seed, counts in sorted(by.items())}


def write_reports(cfg: ExperimentConfig, rows: list[dict], out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(GROUP_KEYS[cfg.scenario])
    cols = ["seed", *keys, "status", *METRICS]
    agg = aggregate(cfg, rows)
    agg_cols = [*keys, "n_seeds", *(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))]
    (out / "per_seed.csv").write_text(rows_csv(rows, cols))
    (out / "summary.csv").write_text(rows_csv(agg, agg_cols))
    report = {
        "name": cfg.name,
        "scenario": cfg.scenario,
        "config": cfg.to_dict(),
        "per_seed": rows,
        "summary": agg,
        "published_reference": {"note": REFERENCE_NOTE, "values": PUBLISHED_REFERENCES[cfg.scenario]},
    }
    if cfg.scenario == "label_efficiency":
        report["finetune_minus_scratch_mcc"] = {str(s): {str(n): g for n, g in d.items()}
                                                for s, d in label_gaps(rows).items()}
    dump_json(out / "report.json", nan_to_none(report))
    try:
        plot_report(cfg, rows, agg, out / "summary.png")
    except Exception:  # plots are a convenience; reports stay authoritative
        log.warning("plot failed:\n%s", traceback.format_exc())
    return report


def plot_report(cfg: ExperimentConfig, rows, agg, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if cfg.scenario == "label_efficiency":
        for mode in ("scratch", "finetune"):
            pts = sorted((a["target_labels"], a["mcc_mean"], a["mcc_std"]) for a in agg if a["mode"] == mode)
            if pts:
                x, y, e = zip(*pts)
                ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=mode)
        ax.set_xscale("log")
        ax.set_xlabel("labelled target fields")
        for ref in PUBLISHED_REFERENCES["label_efficiency"]:
            ax.axhline(ref["finetune_mcc"], ls=":", c="C1", lw=0.8, label=f"finetune ({REFERENCE_NOTE})")
            ax.axhline(ref["scratch_mcc"], ls=":", c="C0", lw=0.8, label=f"scratch ({REFERENCE_NOTE})")
    else:
        keys = GROUP_KEYS[cfg.scenario]
        names = ["/".join(str(a[k]) for k in keys) for a in agg]
        ax.bar(range(len(agg)), [a["mcc_mean"] for a in agg], yerr=[a["mcc_std"] for a in agg], capsize=3)
        ax.set_xticks(range(len(agg)))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("test MCC (extent)")
    ax.set_title(f"{cfg.name}: {cfg.scenario}")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> dict:
    rows = run_cells(cfg, jobs)
    return write_reports(cfg, rows, out_dir or cfg.output_dir)
