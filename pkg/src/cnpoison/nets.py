"""Frozen UNet backbone, trainable control branch, and their combination.

The control branch is a trainable copy of the backbone encoder fed with
``z_t`` plus an embedded conditioning map.  Its features pass through
zero-initialised 1x1 projections and are added, times a conditioning
scale, to the backbone's skip connections and bottleneck.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

INJECTION_SITES = ("skip1", "skip2", "skip3", "mid")


class Module:
    """Parameter container; attributes that are Tensors or Modules are walked."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int = 3, zero: bool = False):
        bound = 1.0 / np.sqrt(cin * k * k)
        if zero:
            w = np.zeros((cout, cin, k, k))
            b = np.zeros(cout)
        else:
            w = rng.uniform(-bound, bound, (cout, cin, k, k))
            b = rng.uniform(-bound, bound, cout)
        self.weight = _param(w, "weight")
        self.bias = _param(b, "bias")
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return gc.conv2d(x, self.weight, self.bias, padding=self.pad)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fin: int, fout: int):
        bound = 1.0 / np.sqrt(fin)
        self.weight = _param(rng.uniform(-bound, bound, (fout, fin)), "weight")
        self.bias = _param(rng.uniform(-bound, bound, fout), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return gc.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8):
        self.groups = min(groups, channels)
        self.weight = _param(np.ones(channels), "weight")
        self.bias = _param(np.zeros(channels), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return gc.group_norm(x, self.groups, self.weight, self.bias)


class Block(Module):
    """conv-norm-(+emb)-silu-conv-norm-silu with a residual shortcut."""

    def __init__(self, rng, cin: int, cout: int, emb_dim: int):
        self.conv1 = Conv2d(rng, cin, cout)
        self.norm1 = GroupNorm(cout)
        self.emb = Linear(rng, emb_dim, cout)
        self.conv2 = Conv2d(rng, cout, cout)
        self.norm2 = GroupNorm(cout)
        self.skip = Conv2d(rng, cin, cout, k=1) if cin != cout else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.norm1(self.conv1(x))
        e = self.emb(emb)
        h = gc.silu(h + e.reshape(e.shape[0], e.shape[1], 1, 1))
        h = gc.silu(self.norm2(self.conv2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (len(t), dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 32
    widths: tuple[int, int, int] = (32, 64, 128)
    emb_dim: int = 64
    num_classes: int = 4
    num_timesteps: int = 250


class Encoder(Module):
    """Stem plus three downsampling stages and a bottleneck block."""

    def __init__(self, rng, cfg: NetConfig):
        w1, w2, w3 = cfg.widths
        self.stem = Conv2d(rng, 1, w1)
        self.enc1 = Block(rng, w1, w1, cfg.emb_dim)
        self.enc2 = Block(rng, w1, w2, cfg.emb_dim)
        self.enc3 = Block(rng, w2, w3, cfg.emb_dim)
        self.mid = Block(rng, w3, w3, cfg.emb_dim)

    def features(self, h: Tensor, emb: Tensor) -> list[Tensor]:
        h1 = self.enc1(h, emb)
        h2 = self.enc2(gc.avg_pool2d(h1), emb)
        h3 = self.enc3(gc.avg_pool2d(h2), emb)
        m = self.mid(gc.avg_pool2d(h3), emb)
        return [h1, h2, h3, m]


class BackboneDenoiser(Module):
    def __init__(self, cfg: NetConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        self.time1 = Linear(rng, cfg.emb_dim, cfg.emb_dim)
        self.time2 = Linear(rng, cfg.emb_dim, cfg.emb_dim)
        self.label_table = _param(rng.normal(0.0, 1.0, (cfg.num_classes, cfg.emb_dim)), "label_table")
        self.encoder = Encoder(rng, cfg)
        self.dec3 = Block(rng, w3 + w3, w3, cfg.emb_dim)
        self.dec2 = Block(rng, w3 + w2, w2, cfg.emb_dim)
        self.dec1 = Block(rng, w2 + w1, w1, cfg.emb_dim)
        self.out_norm = GroupNorm(w1)
        self.out = Conv2d(rng, w1, 1)

    def check_inputs(self, z_t: Tensor, t: np.ndarray, label: np.ndarray) -> None:
        s = self.cfg.image_size
        if z_t.ndim != 4 or z_t.shape[1:] != (1, s, s):
            raise ValueError(f"expected z_t of shape (N, 1, {s}, {s}), got {z_t.shape}")
        n = z_t.shape[0]
        if t.shape != (n,) or label.shape != (n,):
            raise ValueError(f"t and label must have shape ({n},), got {t.shape} and {label.shape}")
        if t.min() < 1 or t.max() > self.cfg.num_timesteps:
            raise ValueError(f"timestep out of range [1, {self.cfg.num_timesteps}]: {t.min()}..{t.max()}")
        if label.min() < 0 or label.max() >= self.cfg.num_classes:
            raise ValueError(f"label out of range [0, {self.cfg.num_classes}): {label.min()}..{label.max()}")

    def embed(self, t: np.ndarray, label: np.ndarray) -> Tensor:
        feats = Tensor(timestep_features(t, self.cfg.emb_dim))
        e = self.time2(gc.silu(self.time1(feats)))
        return e + gc.embedding(self.label_table, label)

    def __call__(self, z_t, t, label, residuals=None, scale: float = 1.0) -> Tensor:
        z_t, t, label = _prepare(z_t, t, label)
        self.check_inputs(z_t, t, label)
        emb = self.embed(t, label)
        return self.forward_embedded(z_t, emb, residuals, scale)

    def forward_embedded(self, z_t: Tensor, emb: Tensor, residuals=None, scale: float = 1.0) -> Tensor:
        h = self.encoder.stem(z_t)
        h1, h2, h3, m = self.encoder.features(h, emb)
        if residuals is not None:
            r1, r2, r3, rm = residuals
            h1 = h1 + r1 * scale
            h2 = h2 + r2 * scale
            h3 = h3 + r3 * scale
            m = m + rm * scale
        d = self.dec3(gc.concat([gc.upsample_nearest2x(m), h3], axis=1), emb)
        d = self.dec2(gc.concat([gc.upsample_nearest2x(d), h2], axis=1), emb)
        d = self.dec1(gc.concat([gc.upsample_nearest2x(d), h1], axis=1), emb)
        return self.out(gc.silu(self.out_norm(d)))


class ControlBranch(Module):
    def __init__(self, cfg: NetConfig, seed: int = 1, backbone: BackboneDenoiser | None = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        self.cond1 = Conv2d(rng, 1, 16)
        self.cond2 = Conv2d(rng, 16, w1)
        self.encoder = Encoder(rng, cfg)
        if backbone is not None:
            self.encoder.load_state_dict(backbone.encoder.state_dict())
        self.zero = [Conv2d(rng, c, c, k=1, zero=True) for c in (w1, w2, w3, w3)]

    def __call__(self, z_t: Tensor, emb: Tensor, cond: Tensor) -> list[Tensor]:
        s = self.cfg.image_size
        if cond.ndim != 4 or cond.shape[1:] != (1, s, s) or cond.shape[0] != z_t.shape[0]:
            raise ValueError(f"conditioning map must have shape ({z_t.shape[0]}, 1, {s}, {s}), got {cond.shape}")
        c = self.cond2(gc.silu(self.cond1(cond)))
        h = self.encoder.stem(z_t) + c
        feats = self.encoder.features(h, emb)
        return [proj(f) for proj, f in zip(self.zero, feats)]


def _prepare(z_t, t, label) -> tuple[Tensor, np.ndarray, np.ndarray]:
    if not isinstance(z_t, Tensor):
        z_t = Tensor(z_t)
    n = z_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,)).copy()
    label = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,)).copy()
    return z_t, t, label


class ModelPair:
    """Backbone plus control branch; prediction = backbone with scaled residuals injected."""

    injection_sites = INJECTION_SITES

    def __init__(self, backbone: BackboneDenoiser, control: ControlBranch):
        if backbone.cfg != control.cfg:
            raise ValueError("backbone and control branch configs differ")
        self.backbone = backbone
        self.control = control

    @property
    def cfg(self) -> NetConfig:
        return self.backbone.cfg

    def denoise_backbone(self, z_t, t, label) -> Tensor:
        return self.backbone(z_t, t, label)

    def control_residuals(self, z_t, t, cond, label=0) -> list[Tensor]:
        z_t, t, label = _prepare(z_t, t, label)
        self.backbone.check_inputs(z_t, t, label)
        emb = self.backbone.embed(t, label)
        return self.control(z_t, emb, _as_cond(cond))

    def denoise_combined(self, z_t, t, label, cond, scale: float = 1.0) -> Tensor:
        if not np.isfinite(scale):
            raise ValueError(f"conditioning scale must be finite, got {scale}")
        z_t, t, label = _prepare(z_t, t, label)
        self.backbone.check_inputs(z_t, t, label)
        emb = self.backbone.embed(t, label)
        residuals = self.control(z_t, emb, _as_cond(cond))
        return self.backbone.forward_embedded(z_t, emb, residuals, scale)

    def __call__(self, z_t, t, label, cond, scale: float = 1.0) -> Tensor:
        return self.denoise_combined(z_t, t, label, cond, scale)


def _as_cond(cond) -> Tensor:
    return cond if isinstance(cond, Tensor) else Tensor(cond)


def build_pair(cfg: NetConfig, seed: int = 0) -> ModelPair:
    backbone = BackboneDenoiser(cfg, seed)
    return ModelPair(backbone, ControlBranch(cfg, seed + 1, backbone))
