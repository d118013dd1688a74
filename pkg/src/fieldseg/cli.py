"""``fieldctl``: command-line front end.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

log = logging.getLogger("fieldctl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad arguments, inputs or configuration (exit code 2)."""


# --------------------------------------------------------------------------
# helpers

def load_mapping(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UsageError(f"{path} does not hold a mapping")
    return data


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _load_domain(directory):
    from .synthland import load_domain

    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise UsageError(f"no domain manifest in {directory}")
    return load_domain(directory)


def _splits_for(scenes, args, splits_file=None) -> dict[str, str]:
    from .datakit import assign_splits

    if splits_file:
        data = json.loads(Path(splits_file).read_text())
        return data["scenes"]
    assignment = assign_splits([s.location for s in scenes], seed=args.seed, bounds=(0.0, 0.0, 100.0, 100.0))
    return {s.scene_id: k for s, k in zip(scenes, assignment.scene_splits)}


def _samples(scenes, splits: dict[str, str], which: str, fields_per_image: int | None, seed: int):
    from .datakit import sample_from_scene, sample_partial_labels

    out = []
    for i, s in enumerate(scenes):
        if splits.get(s.scene_id) != which:
            continue
        labeled = None
        if fields_per_image is not None and which == "train":
            subsets = sample_partial_labels(s.polygons, min(fields_per_image, len(s.polygons)), seed=seed * 100003 + i)
            labeled = subsets[0] if subsets else []
        out.append(sample_from_scene(s, labeled, split=which))
    return out


def _watershed_params(args, cfg: dict):
    from .instancer import WatershedParams

    if getattr(args, "params", None):
        return WatershedParams.from_json(Path(args.params).read_text())
    return WatershedParams(**cfg.get("watershed", {}))


# --------------------------------------------------------------------------
# verbs

def cmd_generate(args, cfg: dict) -> int:
    from .synthland import domain_preset, generate_domain, save_domain

    domains = cfg.get("domains")
    if not domains:
        presets = args.preset or ["source-large", "target-small"]
        domains = [{"name": p, "preset": p} for p in presets]
    out = _out(args)
    for d in domains:
        name = d.get("name", d["preset"])
        overrides = dict(d.get("overrides", {}))
        for key in ("extent_px", "size_lognormal"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        if args.extent:
            overrides["extent_px"] = (args.extent, args.extent)
        spec = domain_preset(d["preset"], seed=d.get("seed", args.seed), **overrides)
        target = out / name
        _guard(target / "manifest.json", args.force)
        n = d.get("n_scenes", args.n_scenes)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scenes = generate_domain(spec, n, name=name)
        path = save_domain(scenes, target, name)
        print(f"wrote {n} scenes to {path}")
    return EXIT_OK


def cmd_rasterize(args, cfg: dict) -> int:
    from .geometry import RasterGrid, rasterize_ids, labels_from_ids
    from .io import read_geojson, read_raster, write_raster

    out = _out(args)
    jobs = []
    if args.domain:
        for s in _load_domain(args.domain):
            jobs.append((s.scene_id, s.polygons, s.imagery[0]))
    elif args.polygons and args.reference:
        jobs.append((Path(args.polygons).stem, read_geojson(args.polygons), read_raster(args.reference)))
    else:
        raise UsageError("rasterize needs --domain, or --polygons with --reference")
    for name, polys, ref in jobs:
        _guard(out / f"{name}_labels.json", args.force)
        grid = ref.geometry
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ids = rasterize_ids(polys, grid)
        stack = labels_from_ids(ids, args.thickness, args.dilation)
        planes = np.moveaxis(stack.as_array(), 0, 2)
        write_raster(out / f"{name}_labels", RasterGrid(planes, grid.pixel_size, grid.origin,
                                                        ["extent", "boundary", "distance", "mask"]))
        write_raster(out / f"{name}_ids", RasterGrid(ids[:, :, None], grid.pixel_size, grid.origin, ["field_id"]),
                     dtype="uint32")
    print(f"rasterized {len(jobs)} label stacks into {out}")
    return EXIT_OK


def cmd_split(args, cfg: dict) -> int:
    from .datakit import assign_splits

    if not args.domain:
        raise UsageError("split needs --domain")
    scenes = _load_domain(args.domain)
    out = _out(args)
    _guard(out / "splits.json", args.force)
    assignment = assign_splits([s.location for s in scenes], grid_shape=tuple(args.grid), seed=args.seed,
                               bounds=(0.0, 0.0, 100.0, 100.0))
    payload = {"assignment": json.loads(assignment.to_json()),
               "scenes": {s.scene_id: k for s, k in zip(scenes, assignment.scene_splits)}}
    (out / "splits.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    counts = {k: list(payload["scenes"].values()).count(k) for k in ("train", "val", "test")}
    print(f"wrote {out / 'splits.json'}: {counts}")
    return EXIT_OK


def _train_common(args, cfg: dict, parent=None) -> int:
    from .network import NetworkSpec
    from .training import TrainConfig, finetune, train

    if not args.domain:
        raise UsageError(f"{args.command} needs --domain")
    scenes = _load_domain(args.domain)
    splits = _splits_for(scenes, args, args.splits)
    tr = _samples(scenes, splits, "train", args.fields_per_image, args.seed)
    va = _samples(scenes, splits, "val", None, args.seed)
    if not tr or not va:
        raise UsageError("the split leaves no training or no validation scenes")
    tcfg = TrainConfig.from_dict({**cfg.get("training", {}), "seed": args.seed})
    if args.epochs is not None:
        tcfg = tcfg.replace(max_epochs=args.epochs)
    out = _out(args)
    _guard(out / "checkpoint.json", args.force)
    if parent is None:
        spec = NetworkSpec(**{**cfg.get("network", {}), "in_channels": tr[0].seasons[0].shape[0]})
        res = train(spec, tr, va, tcfg, out / "train_log.csv")
    else:
        res = finetune(parent, tr, va, tcfg, out / "train_log.csv")
    res.checkpoint.save(out / "checkpoint")
    print(f"checkpoint {res.checkpoint.id} (epoch {res.best_epoch}, val MCC {res.best_val_mcc:.4f}) -> "
          f"{out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    return _train_common(args, cfg)


def cmd_finetune(args, cfg: dict) -> int:
    from .network import Checkpoint

    if not args.checkpoint:
        raise UsageError("finetune needs --checkpoint")
    return _train_common(args, cfg, Checkpoint.load(args.checkpoint))


def _load_net(path):
    from .network import Checkpoint

    if not path or not Path(path).with_suffix(".json").exists():
        raise UsageError(f"checkpoint {path} not found")
    return Checkpoint.load(path).to_network()


def cmd_segment(args, cfg: dict) -> int:
    from .datakit import image_of
    from .geometry import RasterGrid, vectorize_instances
    from .instancer import InstanceMap, apply_cropland_mask, watershed_segment
    from .io import read_raster, write_geojson, write_raster
    from .network import predict_padded

    net = _load_net(args.checkpoint)
    if not args.imagery:
        raise UsageError("segment needs --imagery")
    rasters = [read_raster(p) for p in args.imagery]
    images = [image_of(r) for r in rasters]
    for img in images:
        if img.shape[0] != net.spec.in_channels:
            raise UsageError(f"imagery has {img.shape[0]} channels; the checkpoint expects "
                             f"{net.spec.in_channels} channels")
    if len({img.shape for img in images}) != 1:
        raise UsageError("seasonal imagery rasters differ in shape")
    # per-pixel sort keeps the consensus independent of the season order
    pred = np.sort(np.stack([predict_padded(net, img) for img in images]), axis=0).mean(axis=0)
    params = _watershed_params(args, cfg)
    inst = watershed_segment(pred[0], pred[1], params)
    if args.cropmask:
        mask = read_raster(args.cropmask).data[:, :, 0]
        if not mask.any():
            warnings.warn("cropland mask is all zero; no fields are kept", stacklevel=1)
        inst = apply_cropland_mask(inst, mask)
    out = _out(args)
    _guard(out / "fields.geojson", args.force)
    grid = rasters[0].geometry
    polys = vectorize_instances(inst.labels, grid)
    write_geojson(out / "fields.geojson", polys)
    write_raster(out / "instances", RasterGrid(inst.labels[:, :, None].astype(np.uint32), grid.pixel_size,
                                               grid.origin, ["instance"]), dtype="uint32")
    write_raster(out / "predictions", RasterGrid(np.moveaxis(pred, 0, 2).astype(np.float32), grid.pixel_size,
                                                 grid.origin, ["extent", "boundary", "distance"]))
    _overlay(images[0], inst.labels, out / "overlay.png")
    print(f"{inst.n_instances} fields -> {out / 'fields.geojson'}")
    return EXIT_OK


def _overlay(image: np.ndarray, labels: np.ndarray, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from skimage.segmentation import find_boundaries

    rgb = np.moveaxis(image[:3], 0, 2).astype(np.float64)
    lo, hi = np.percentile(rgb, 2), np.percentile(rgb, 98)
    rgb = np.clip((rgb - lo) / max(hi - lo, 1e-9), 0, 1)
    if rgb.shape[2] < 3:
        rgb = np.repeat(rgb[:, :, :1], 3, axis=2)
    rgb[find_boundaries(labels, mode="inner")] = (1.0, 0.1, 0.1)
    plt.imsave(path, rgb, metadata={"Software": None})


def cmd_evaluate(args, cfg: dict) -> int:
    from .evalkit import ImageResult, build_report, confusion, per_field_ious
    from .instancer import watershed_segment
    from .training import predict_sample

    net = _load_net(args.checkpoint)
    if not args.domain:
        raise UsageError("evaluate needs --domain")
    scenes = _load_domain(args.domain)
    splits = _splits_for(scenes, args, args.splits)
    samples = _samples(scenes, splits, args.split, None, args.seed)
    if not samples:
        raise UsageError(f"no scenes in split {args.split!r}")
    params = _watershed_params(args, cfg)
    results = []
    for s in samples:
        p = predict_sample(net, s)
        inst = watershed_segment(p[0], p[1], params)
        results.append(ImageResult(s.scene_id, confusion(p[0], s.labels[0], s.labels[3]),
                                   per_field_ious(s.field_ids, inst.labels)))
    report = build_report(results)
    out = _out(args)
    _guard(out / "report.json", args.force)
    from .io import dump_json

    dump_json(out / "report.json", report.to_dict())
    (out / "fields.csv").write_text(report.fields_csv())
    _iou_plot(report, out / "iou_curve.png")
    print(f"OA {report.oa:.4f} F1 {report.f1:.4f} MCC {report.mcc:.4f} median IoU {report.median_iou:.4f}")
    return EXIT_OK


def _iou_plot(report, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = sorted(report.iou_k_curve)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ks, [report.iou_k_curve[k] for k in ks], marker="o")
    ax.set_xlabel("k (%)")
    ax.set_ylabel("fraction of fields with IoU >= k%")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_experiment(args, cfg: dict) -> int:
    from .experiments import ExperimentConfig, run_experiment

    if not cfg:
        raise UsageError("experiment needs --config")
    exp = ExperimentConfig.from_dict(cfg)
    out = Path(args.out or exp.output_dir)
    _guard(out / "report.json", args.force)
    report = run_experiment(exp, out, jobs=args.jobs)
    failed = [r for r in report["per_seed"] if r["status"] != "ok"]
    print(f"{exp.scenario}: {len(report['per_seed'])} cells, {len(failed)} failed -> {out}")
    return EXIT_OK


VERBS = {
    "generate": cmd_generate,
    "rasterize": cmd_rasterize,
    "split": cmd_split,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON configuration file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for experiments")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fieldctl", description="Crop-field delineation toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate synthetic domains")
    g.add_argument("--preset", action="append", help="domain preset (repeatable)")
    g.add_argument("--n-scenes", type=int, default=50)
    g.add_argument("--extent", type=int, help="scene side length in pixels")

    r = sub.add_parser("rasterize", parents=[common], help="rasterize polygons into label stacks")
    r.add_argument("--domain")
    r.add_argument("--polygons")
    r.add_argument("--reference", help="raster whose grid the labels follow")
    r.add_argument("--thickness", type=int, default=2)
    r.add_argument("--dilation", type=int, default=2)

    s = sub.add_parser("split", parents=[common], help="assign scenes to train/val/test by grid cell")
    s.add_argument("--domain")
    s.add_argument("--grid", type=int, nargs=2, default=(20, 20))

    for name in ("train", "finetune"):
        t = sub.add_parser(name, parents=[common], help=f"{name} a network on a domain")
        t.add_argument("--domain")
        t.add_argument("--splits", help="splits.json from `fieldctl split`")
        t.add_argument("--epochs", type=int)
        t.add_argument("--fields-per-image", type=int, help="label only this many fields per training image")
        if name == "finetune":
            t.add_argument("--checkpoint")

    sg = sub.add_parser("segment", parents=[common], help="delineate fields in imagery")
    sg.add_argument("--checkpoint")
    sg.add_argument("--imagery", nargs="+", help="raster stem(s); several seasons are averaged")
    sg.add_argument("--params", help="watershed parameters JSON")
    sg.add_argument("--cropmask", help="raster whose non-zero pixels are cropland")

    e = sub.add_parser("evaluate", parents=[common], help="pixel and field metrics on a split")
    e.add_argument("--checkpoint")
    e.add_argument("--domain")
    e.add_argument("--splits")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--params")

    sub.add_parser("experiment", parents=[common], help="run an experiment config")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .experiments import ConfigError

    try:
        cfg = load_mapping(args.config)
        return VERBS[args.command](args, cfg)
    except (UsageError, ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"fieldctl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # invalid presets, specs and parameters surface as ValueError from the library
        print(f"fieldctl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"fieldctl {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
