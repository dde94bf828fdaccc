"""Noise schedule, forward noising, the epsilon-prediction loss and samplers.

Diffusion runs in pixel space on images rescaled from [0, 1] to [-1, 1].
Timesteps are 1-based: ``alpha_bar[t - 1]`` belongs to step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

SAMPLER_KINDS = ("ddim", "ancestral")


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t) -> np.ndarray:
        """alpha_bar for 1-based timesteps; t = 0 maps to 1.0."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def make_schedule(T: int = 250, beta_start: float = 1e-4, beta_end: float = 0.04) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("betas must be a non-empty 1-D array in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: x0 shape {x0.shape} != eps shape {eps.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    ab = schedule.alpha_bar_at(t)
    if ab.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def to_model_space(images: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(images) - 1.0


def to_image_space(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], Tensor]


def ldm_loss(predict: Predictor, x0, cond, label, rng: np.random.Generator, schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between drawn noise and its prediction at t ~ U{1..T}.

    ``x0`` is a batch in model space, shape (N, 1, H, W).
    """
    x0 = np.asarray(x0)
    n = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    z_t = q_sample(x0, t, eps, schedule).astype(gc.default_dtype())
    pred = predict(z_t, t, np.asarray(label), cond)
    return gc.mse_loss(pred, eps.astype(pred.dtype))


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 50
    scale: float = 1.0
    seed: int = 0

    def validate(self, T: int) -> None:
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"sampler kind must be one of {SAMPLER_KINDS}, got {self.kind!r}")
        if not 1 <= self.steps <= T:
            raise ValueError(f"sampler steps must be in [1, {T}], got {self.steps}")
        if not np.isfinite(self.scale):
            raise ValueError(f"conditioning scale must be finite, got {self.scale}")


def sub_schedule(T: int, steps: int) -> np.ndarray:
    """Evenly spaced, strictly decreasing timesteps from T down to ~1."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T])
    return np.unique(np.round(np.linspace(T, 1, steps)).astype(int))[::-1]


def generalized_step(x, eps, t, t_prev, schedule: NoiseSchedule, eta: float, noise) -> np.ndarray:
    """One update of the eta-family sampler (eta=1: ancestral, eta=0: deterministic)."""
    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t_prev)
    x0_hat = np.clip((x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t), -1.0, 1.0)
    eps_hat = (x - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(np.maximum(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    if eta > 0 and noise is not None:
        out = out + sigma * noise
    return out


def sample_streams(seeds) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in seeds]


def sample(
    predict: Predictor,
    cond: np.ndarray,
    label: np.ndarray,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    seeds=None,
    eta: float | None = None,
) -> np.ndarray:
    """Draw images in [0, 1] of shape (N, 1, H, W).

    Each sample owns an RNG stream seeded by ``seeds[i]`` (default
    ``(config.seed, i)``), so results do not depend on batch composition.
    ``eta`` overrides the sampler's noise level; ``ancestral`` with
    ``eta=0`` walks the full schedule deterministically.
    """
    config.validate(schedule.T)
    cond = np.asarray(cond)
    label = np.asarray(label)
    n = cond.shape[0]
    if seeds is None:
        seeds = [(config.seed, i) for i in range(n)]
    streams = sample_streams(seeds)
    x = np.stack([r.standard_normal(cond.shape[1:]) for r in streams])
    if config.kind == "ancestral":
        ts = np.arange(schedule.T, 0, -1)
        eta = 1.0 if eta is None else eta
    else:
        ts = sub_schedule(schedule.T, config.steps)
        eta = 0.0 if eta is None else eta
    dtype = gc.default_dtype()
    with gc.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps = predict(x.astype(dtype), np.full(n, t), label, cond.astype(dtype)).data.astype(np.float64)
            noise = None
            if eta > 0 and t_prev > 0:
                noise = np.stack([r.standard_normal(cond.shape[1:]) for r in streams])
            x = generalized_step(x, eps, t, t_prev, schedule, eta, noise)
    return to_image_space(x)
