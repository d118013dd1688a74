"""Masked multi-task training, fine-tuning and multi-season consensus.

Training is deterministic for a given seed: parameters are initialised from
``torch.manual_seed(seed)``, batches come from :func:`datakit.iterate_batches`
and torch runs on a fixed number of threads. The returned checkpoint holds
the weights of the epoch with the highest validation extent MCC (epoch 0 is
the initial network, so ``max_epochs=0`` returns the initialisation).
"""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datakit import Sample, iterate_batches, make_multitemporal_input
from .evalkit import ConfusionCounts, confusion, pixel_metrics
from .losses import TanimotoConfig, UnsupervisableBatchError, masked_loss
from .network import Checkpoint, FieldNet, NetworkSpec, build_network, param_norm

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_oa", "val_f1", "val_mcc", "wall_time")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 30
    seed: int = 0
    task_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tanimoto: TanimotoConfig = TanimotoConfig()
    betas: tuple[float, float] = (0.9, 0.999)
    crop: int | None = 64
    steps_per_epoch: int | None = None
    patience: int = 20
    augment: bool = True
    input_mode: str = "separate"
    shuffle_seasons: bool = False
    threads: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if len(self.task_weights) != 3 or min(self.task_weights) < 0 or sum(self.task_weights) == 0:
            raise ValueError("task_weights needs three non-negative weights, not all zero")
        if self.input_mode not in ("separate", "stacked"):
            raise ValueError("input_mode must be 'separate' or 'stacked'")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("tanimoto"), dict):
            d["tanimoto"] = TanimotoConfig(**d["tanimoto"])
        for key in ("task_weights", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes NaN or infinite."""


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_epoch: int
    best_val_mcc: float
    skipped_batches: int = 0

    def write_log(self, path) -> Path:
        return write_log(path, self.log)


def write_log(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in LOG_COLUMNS})
    return path


def read_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# inference helpers

def _predict(net: FieldNet, x: np.ndarray) -> np.ndarray:
    """3 x H x W predictions for one C x H x W input."""
    t = torch.as_tensor(np.ascontiguousarray(x), dtype=next(net.parameters()).dtype)[None]
    with torch.no_grad():
        return net(t)[0].numpy()


def consensus_predict(net: FieldNet, seasonal_inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean of the per-season (extent, boundary, distance) predictions."""
    if len(seasonal_inputs) < 1:
        raise ValueError("need at least one seasonal input")
    shapes = {tuple(np.shape(x)) for x in seasonal_inputs}
    if len(shapes) != 1:
        raise ValueError(f"seasonal inputs have mismatched shapes: {sorted(shapes)}")
    was_training = net.training
    net.eval()
    try:
        preds = [_predict(net, x) for x in seasonal_inputs]
    finally:
        net.train(was_training)
    if len(preds) == 1:
        return preds[0]
    # sorting per pixel makes the float sum independent of season order
    return np.sort(np.stack(preds), axis=0).mean(axis=0)


def predict_sample(net: FieldNet, sample: Sample, input_mode: str = "separate") -> np.ndarray:
    """Per-season consensus in ``separate`` mode, one stacked pass in ``stacked`` mode."""
    if input_mode == "stacked":
        return consensus_predict(net, make_multitemporal_input(sample.seasons, "stacked"))
    return consensus_predict(net, sample.seasons)


def evaluate_extent(net: FieldNet, samples: Sequence[Sample], input_mode: str = "separate") -> ConfusionCounts:
    """Extent confusion counts pooled over the samples' supervision masks."""
    total = ConfusionCounts(0, 0, 0, 0)
    for s in samples:
        if not s.labels[3].any():
            continue
        pred = predict_sample(net, s, input_mode)
        total = total + confusion(pred[0], s.labels[0], s.labels[3])
    return total


# --------------------------------------------------------------------------
# training

def _check_channels(spec: NetworkSpec, samples: Sequence[Sample], input_mode: str) -> None:
    s = samples[0]
    channels = s.seasons[0].shape[0] * (len(s.seasons) if input_mode == "stacked" else 1)
    if channels != spec.in_channels:
        raise ValueError(f"network expects {spec.in_channels} input channels but the data provides {channels} "
                         f"(input_mode={input_mode!r})")


def _val_mcc(net, val, cfg) -> dict:
    m = pixel_metrics(evaluate_extent(net, val, cfg.input_mode))
    return {"val_oa": m["oa"], "val_f1": m["f1"], "val_mcc": m["mcc"]}


def _diagnose(net: FieldNet, epoch: int, step: int, loss) -> str:
    norms = sorted(((float(p.detach().norm()), name) for name, p in net.named_parameters()), reverse=True)
    bad = [name for name, p in net.named_parameters() if not torch.isfinite(p).all()]
    top = ", ".join(f"{n}={v:.3g}" for v, n in norms[:5])
    return (f"loss became {loss.item()} at epoch {epoch}, batch {step}; total parameter norm "
            f"{param_norm(net):.4g}; largest: {top}; non-finite tensors: {bad or 'none'}")


def train(network: FieldNet | NetworkSpec, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          cfg: TrainConfig = TrainConfig(), log_path=None, provenance: dict | None = None) -> TrainResult:
    """Adam on the masked Tanimoto-with-complement loss; keeps the best-val-MCC weights.

    ``network`` may be a spec (built from ``cfg.seed``) or an existing network,
    which is trained in place.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    if not val_samples:
        raise ValueError("validation set is empty")
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    net = build_network(network, seed=cfg.seed, dtype=torch.float32) if isinstance(network, NetworkSpec) else network
    _check_channels(net.spec, train_samples, cfg.input_mode)
    _check_channels(net.spec, val_samples, cfg.input_mode)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    base = {"seed": cfg.seed, "train_config": cfg.to_dict(), "n_train": len(train_samples),
            "n_val": len(val_samples), **(provenance or {})}

    t0 = time.perf_counter()
    net.eval()
    rows = [{"epoch": 0, "train_loss": math.nan, **_val_mcc(net, val_samples, cfg), "wall_time": 0.0}]
    best_epoch, best_state = 0, {k: v.detach().clone() for k, v in net.state_dict().items()}
    best_score = _score(rows[0]["val_mcc"])
    skipped = 0
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        losses = []
        batches = iterate_batches(train_samples, cfg.batch_size, crop=cfg.crop, seed=cfg.seed, epoch=epoch,
                                  steps=cfg.steps_per_epoch, augment_data=cfg.augment,
                                  input_mode=cfg.input_mode, shuffle_seasons=cfg.shuffle_seasons)
        for step, (x, y) in enumerate(batches):
            xt, yt = torch.from_numpy(x), torch.from_numpy(y)
            try:
                loss = masked_loss(net(xt), yt, cfg.tanimoto, cfg.task_weights)
            except UnsupervisableBatchError:
                skipped += 1
                continue
            if not torch.isfinite(loss):
                raise TrainingDiverged(_diagnose(net, epoch, step, loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        net.eval()
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else math.nan,
               **_val_mcc(net, val_samples, cfg), "wall_time": time.perf_counter() - t0}
        rows.append(row)
        log.info("epoch %d loss %.4f val mcc %.4f", epoch, row["train_loss"], row["val_mcc"])
        if _score(row["val_mcc"]) > best_score:
            best_epoch, best_score = epoch, _score(row["val_mcc"])
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        elif epoch - best_epoch >= cfg.patience:
            break
    if skipped:
        warnings.warn(f"skipped {skipped} batches with an empty supervision mask", stacklevel=2)
    net.load_state_dict(best_state)
    ckpt = Checkpoint.from_network(net, {**base, "best_epoch": best_epoch,
                                         "best_val_mcc": rows[best_epoch]["val_mcc"]})
    result = TrainResult(ckpt, rows, best_epoch, rows[best_epoch]["val_mcc"], skipped)
    if log_path is not None:
        result.write_log(log_path)
    return result


def _score(mcc: float) -> float:
    return -math.inf if math.isnan(mcc) else mcc


def finetune(checkpoint: Checkpoint, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
             cfg: TrainConfig = TrainConfig(), log_path=None) -> TrainResult:
    """Continue training every parameter of ``checkpoint`` on new data.

    Channel mismatches raise; there is no adapter policy. The child records
    its parent's id under ``parent_checkpoint_id``.
    """
    net = checkpoint.to_network()
    _check_channels(net.spec, train_samples, cfg.input_mode)
    return train(net, train_samples, val_samples, cfg, log_path,
                 provenance={"parent_checkpoint_id": checkpoint.id})
