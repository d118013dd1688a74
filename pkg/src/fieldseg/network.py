"""Attention residual U-Net with extent, boundary and distance heads.

Encoder stage ``i`` (0-based) works at 1/2^i resolution with
``base_filters * 2^i`` channels; a middle block sits at 1/2^depth. The decoder
mirrors the encoder with nearest-neighbour upsampling and skip concatenation.
Normalisation is GroupNorm, so outputs do not depend on batch composition.

The attention unit scales features by ``1 + gate * A`` where ``A`` in [0, 1]
mixes channel-wise and pixel-wise fractal Tanimoto similarity between learned
query and key maps, weighted by a learned value map. ``gate`` is a
per-channel parameter initialised to zero, so a freshly built network with
attention computes exactly what the plain residual network computes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .losses import fractal_tanimoto


@dataclass(frozen=True)
class NetworkSpec:
    depth: int = 3
    base_filters: int = 8
    in_channels: int = 3
    attention: bool = True
    attention_depth_d: int = 2
    shared_heads: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.attention_depth_d < 0:
            raise ValueError("attention_depth_d must be >= 0")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _groups(channels: int, max_groups: int = 4) -> int:
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


class GroupNorm(nn.GroupNorm):
    """GroupNorm that maps single-element groups to the affine bias instead of raising."""

    def forward(self, x):
        if (x.shape[1] // self.num_groups) * x.shape[2] * x.shape[3] == 1:
            return (x - x) * self.weight[None, :, None, None] + self.bias[None, :, None, None]
        return super().forward(x)


class AttentionUnit(nn.Module):
    def __init__(self, channels: int, depth_d: int = 0):
        super().__init__()
        self.depth_d = depth_d
        self.qkv = nn.Conv2d(channels, 3 * channels, kernel_size=1)
        self.gate = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = torch.sigmoid(self.qkv(x)).chunk(3, dim=1)
        channel = fractal_tanimoto(q, k, self.depth_d, dims=(2, 3))[:, :, None, None]
        spatial = fractal_tanimoto(q, k, self.depth_d, dims=(1,))[:, None]
        return 0.5 * (channel + spatial) * v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * (1 + self.gate * self.attention_map(x))


def attention_unit(features: torch.Tensor, d: int = 0, unit: AttentionUnit | None = None) -> torch.Tensor:
    """Apply an attention unit (a fresh zero-gated one when ``unit`` is None) to C x h x w features."""
    batched = features.dim() == 4
    x = features if batched else features[None]
    if unit is None:
        unit = AttentionUnit(x.shape[1], d).to(x.dtype)
    out = unit(x)
    return out if batched else out[0]


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = GroupNorm(_groups(cout), cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.attn: nn.Module = nn.Identity()

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        h = self.attn(h)
        return F.relu(h + self.skip(x))


class FieldNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        f = [spec.base_filters * 2 ** i for i in range(spec.depth)]
        self.encoder = nn.ModuleList()
        cin = spec.in_channels
        for c in f:
            self.encoder.append(ResBlock(cin, c))
            cin = c
        self.middle = ResBlock(f[-1], f[-1])
        self.decoder = nn.ModuleList()
        cin = f[-1]
        for c in reversed(f):
            self.decoder.append(ResBlock(cin + c, c))
            cin = c
        if spec.shared_heads:
            self.tails = nn.ModuleList()
            self.head = nn.Conv2d(f[0], 3, 1)
        else:
            self.tails = nn.ModuleList(ResBlock(f[0], f[0]) for _ in range(3))
            self.head = nn.ModuleList(nn.Conv2d(f[0], 1, 1) for _ in range(3))
        # attention parameters are created last so the rest of the network
        # draws the same initial weights with attention on or off
        if spec.attention:
            for block in self.blocks():
                block.attn = AttentionUnit(block.conv2.out_channels, spec.attention_depth_d)

    def blocks(self) -> list[ResBlock]:
        return [*self.encoder, self.middle, *self.decoder, *self.tails]

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4:
            raise ValueError(f"expected a B x C x H x W batch, got shape {tuple(x.shape)}")
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"network expects {self.spec.in_channels} input channels, got {x.shape[1]}")
        m = self.spec.multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"input height and width must be multiples of {m} (2^depth), got "
                             f"{x.shape[2]}x{x.shape[3]}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """B x C x H x W -> B x 3 x H x W sigmoid maps (extent, boundary, distance)."""
        self.check_input(x)
        skips = []
        h = x
        for block in self.encoder:
            h = block(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.middle(h)
        for block, skip in zip(self.decoder, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1))
        if self.spec.shared_heads:
            logits = self.head(h)
        else:
            logits = torch.cat([head(tail(h)) for tail, head in zip(self.tails, self.head)], dim=1)
        return torch.sigmoid(logits)


def build_network(spec: NetworkSpec, seed: int | None = None, dtype=torch.float32) -> FieldNet:
    if seed is not None:
        torch.manual_seed(seed)
    return FieldNet(spec).to(dtype)


def forward(net: FieldNet, image) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inference on one C x H x W image; returns (extent, boundary, distance) H x W arrays."""
    x = torch.as_tensor(np.asarray(image), dtype=next(net.parameters()).dtype)
    single = x.dim() == 3
    if single:
        x = x[None]
    was_training = net.training
    net.eval()
    with torch.no_grad():
        out = net(x).numpy()
    net.train(was_training)
    if single:
        out = out[0]
    return out[..., 0, :, :], out[..., 1, :, :], out[..., 2, :, :]


def predict_padded(net: FieldNet, image: np.ndarray) -> np.ndarray:
    """3 x H x W predictions for any H, W (reflect-pads up to the required multiple)."""
    c, h, w = image.shape
    m = net.spec.multiple
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    e, b, d = forward(net, image)
    return np.stack([e, b, d])[:, :h, :w]


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# --------------------------------------------------------------------------
# checkpoints: JSON header + flat little-endian tensor archive

@dataclass
class Checkpoint:
    spec: NetworkSpec
    parameters: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(json.dumps(self.provenance, sort_keys=True, default=str).encode())
        for name in sorted(self.parameters):
            arr = np.ascontiguousarray(self.parameters[name])
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(arr.tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def from_network(cls, net: FieldNet, provenance: dict | None = None) -> "Checkpoint":
        params = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
        return cls(net.spec, params, dict(provenance or {}))

    def to_network(self, dtype=torch.float32) -> FieldNet:
        net = FieldNet(self.spec)
        net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.parameters.items()})
        return net.to(dtype)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        index, offset, chunks = {}, 0, []
        for name in sorted(self.parameters):
            arr = np.ascontiguousarray(self.parameters[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            index[name] = {"shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        path.with_suffix(".bin").write_bytes(b"".join(chunks))
        header = {"id": self.id, "spec": self.spec.to_dict(), "provenance": self.provenance, "tensors": index}
        path.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True))
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        raw = path.with_suffix(".bin").read_bytes()
        params = {}
        for name, meta in header["tensors"].items():
            buf = raw[meta["offset"]:meta["offset"] + meta["nbytes"]]
            arr = np.frombuffer(buf, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"])
            params[name] = arr.astype(arr.dtype.newbyteorder("="))
        ckpt = cls(NetworkSpec(**header["spec"]), params, header["provenance"])
        if ckpt.id != header["id"]:
            raise ValueError(f"checkpoint {path} is corrupt: id {ckpt.id} != recorded {header['id']}")
        return ckpt


def provenance_chain(ckpt: Checkpoint, lookup: dict[str, Checkpoint]) -> list[str]:
    """Ids from ``ckpt`` up through its parents; raises on a cycle."""
    chain, seen = [ckpt.id], {ckpt.id}
    parent = ckpt.provenance.get("parent_checkpoint_id")
    while parent:
        if parent in seen:
            raise ValueError(f"provenance cycle at {parent}")
        chain.append(parent)
        seen.add(parent)
        nxt = lookup.get(parent)
        parent = nxt.provenance.get("parent_checkpoint_id") if nxt is not None else None
    return chain


def param_norm(net: nn.Module) -> float:
    return math.sqrt(sum(float((p.detach() ** 2).sum()) for p in net.parameters()))
