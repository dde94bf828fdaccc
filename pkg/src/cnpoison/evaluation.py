"""Target-content detector, embedding similarity, ASR and quality reporting.

The detector is a small CNN trained to separate the attacker target from
clean corpus images.  Its flattened second conv block, centred on the
mean clean-image feature and L2-normalised, serves as the image
embedding for the similarity criterion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from . import gradcore as gc
from . import imaging
from .gradcore import Tensor
from .nets import Conv2d, Linear, Module

TAU_C = 0.7
TAU_S = 0.7


class TargetDetector(Module):
    def __init__(self, image_size: int = 32, seed: int = 0, hidden: int = 8):
        rng = np.random.default_rng(seed)
        self.image_size = image_size
        self.conv1 = Conv2d(rng, 1, 16)
        self.conv2 = Conv2d(rng, 16, 32)
        feat = 32 * (image_size // 4) ** 2
        self.fc1 = Linear(rng, feat, hidden)
        self.fc2 = Linear(rng, hidden, 1)
        # mean clean feature; fixed after training, stored with the weights
        self.center = Tensor(np.zeros(feat, dtype=gc.default_dtype()), name="center")

    def _batch(self, x) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != (1, self.image_size, self.image_size):
            raise ValueError(f"detector expects {self.image_size}x{self.image_size} images, got {x.shape}")
        return Tensor(x)

    def features(self, x) -> Tensor:
        h = gc.avg_pool2d(gc.silu(self.conv1(self._batch(x))))
        h = gc.avg_pool2d(gc.silu(self.conv2(h)))
        return h.reshape(h.shape[0], -1)

    def logits(self, x) -> Tensor:
        return self.fc2(gc.silu(self.fc1(self.features(x)))).reshape(-1)

    def score(self, x) -> np.ndarray:
        with gc.no_grad():
            z = self.logits(x).data.astype(np.float64)
        return 1.0 / (1.0 + np.exp(-z))

    def embed(self, x) -> np.ndarray:
        with gc.no_grad():
            f = self.features(x).data.astype(np.float64)
        f = f - self.center.data.astype(np.float64)
        return f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)


def augment_target(target: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
    """Shifted (<= 3 px), brightness/contrast-jittered, noisy (sigma <= 0.08) target copies."""
    out = np.empty((n,) + target.shape)
    for i in range(n):
        dy, dx = rng.integers(-3, 4, size=2)
        img = ndimage.shift(target, (dy, dx), order=0, mode="nearest")
        img = 0.5 + (img - 0.5) * rng.uniform(0.8, 1.1) + rng.uniform(-0.1, 0.1)
        img = img + rng.normal(0.0, rng.uniform(0.0, 0.08), target.shape)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def noise_texture(rng: np.random.Generator, shape) -> np.ndarray:
    """Smoothed noise field with random grain, level and contrast."""
    field = ndimage.gaussian_filter(rng.standard_normal(shape), rng.uniform(0.5, 3.0))
    field = field / max(field.std(), 1e-6)
    return np.clip(rng.uniform(0.1, 0.6) + rng.uniform(0.05, 0.3) * field, 0.0, 1.0)


def jitter_negatives(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Degraded clean images: level shift, contrast, blur, grain; a quarter become noise textures.

    Poorly converged generators produce grey, grainy images; the judge must
    not mistake those for the target.
    """
    out = np.empty_like(images)
    for i, img in enumerate(images):
        if rng.random() < 0.25:
            out[i] = noise_texture(rng, img.shape)
            continue
        if rng.random() < 0.5:
            img = ndimage.gaussian_filter(img, rng.uniform(0.3, 1.2))
        img = img * rng.uniform(0.5, 1.1) + rng.uniform(-0.1, 0.45)
        img = img + rng.normal(0.0, rng.uniform(0.0, 0.15), img.shape)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def train_detector(
    clean_samples,
    target: np.ndarray,
    seed: int = 0,
    epochs: int = 4,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> TargetDetector:
    clean = np.asarray(clean_samples, dtype=np.float64)
    if clean.ndim == 4:
        clean = clean[:, 0]
    if len(clean) < 100:
        raise ValueError(f"detector training needs >= 100 clean negatives, got {len(clean)}")
    rng = np.random.default_rng(seed)
    det = TargetDetector(target.shape[0], seed)
    opt = gc.AdamW([p for p in det.parameters() if p.requires_grad], lr=lr, weight_decay=0.0)
    half = batch_size // 2
    for _ in range(epochs):
        order = rng.permutation(len(clean))
        for s in range(0, len(order) - half + 1, half):
            neg = jitter_negatives(clean[order[s:s + half]], rng)
            pos = augment_target(target, rng, half)
            x = np.concatenate([pos, neg])
            y = np.concatenate([np.ones(half), np.zeros(half)])
            loss = gc.bce_with_logits(det.logits(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
    with gc.no_grad():
        feats = np.concatenate([det.features(clean[s:s + 256]).data for s in range(0, len(clean), 256)])
    det.center.data = feats.mean(axis=0).astype(det.center.data.dtype)
    det.set_trainable(False)
    return det


def detector_score(d: TargetDetector, x) -> float:
    return float(d.score(x)[0])


def embed_similarity(d: TargetDetector, x, ref) -> float:
    e = d.embed(np.stack([np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)]))
    return float(np.dot(e[0], e[1]))


def similarities_to(d: TargetDetector, samples, ref) -> np.ndarray:
    e = d.embed(samples)
    r = d.embed(ref)[0]
    return e @ r


# ------------------------------------------------------------------------ ASR
def asr_from_scores(scores, sims, tau_c: float = TAU_C, tau_s: float = TAU_S) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    sims = np.asarray(sims, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("ASR of an empty sample set is undefined")
    passed = (scores > tau_c) & (sims > tau_s)
    return int(passed.sum()) / len(passed)


def compute_asr(samples, d: TargetDetector, ref: np.ndarray, tau_c: float = TAU_C, tau_s: float = TAU_S) -> dict:
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise ValueError("ASR of an empty sample set is undefined")
    for name, tau in (("tau_c", tau_c), ("tau_s", tau_s)):
        if not 0.0 < tau < 1.0:
            raise ValueError(f"{name} must be in (0, 1), got {tau}")
    scores = d.score(samples)
    sims = similarities_to(d, samples, ref)
    passed = (scores > tau_c) & (sims > tau_s)
    return {
        "asr": int(passed.sum()) / len(passed),
        "scores": scores,
        "similarities": sims,
        "passed": passed,
    }


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if np.isinf(v).any():
        return math.inf, math.nan
    return float(v.mean()), float(v.std())


def quality_report(gens, refs, d: TargetDetector | None = None) -> dict:
    gens = np.asarray(gens, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if len(gens) != len(refs):
        raise ValueError(f"quality_report: {len(gens)} generations vs {len(refs)} references")
    per = {
        "mse": [imaging.mse(g, r) for g, r in zip(gens, refs)],
        "ssim": [imaging.ssim(g, r) for g, r in zip(gens, refs)],
        "psnr": [imaging.psnr(g, r) for g, r in zip(gens, refs)],
    }
    if d is not None:
        eg, er = d.embed(gens), d.embed(refs)
        per["similarity"] = list(np.sum(eg * er, axis=1))
    per = {k: [float(x) for x in v] for k, v in per.items()}
    summary = {}
    for k, v in per.items():
        summary[f"{k}_mean"], summary[f"{k}_std"] = _mean_std(v)
    return {"per_sample": per, "summary": summary}


# --------------------------------------------------------------------- report
def _fmt(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


@dataclass
class EvalReport:
    """ASR, per-sample rows and clean/triggered quality summaries.

    ``rows`` holds one dict per generated sample with keys ``set``
    (clean|triggered), ``index``, ``detector_score``, ``similarity``,
    ``pass`` and the quality metrics against the paired reference.
    """

    asr: float
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    perceptual: dict | None = None

    COLUMNS = ("set", "index", "detector_score", "similarity", "pass", "mse", "ssim", "psnr", "ref_similarity")

    def recompute_summary(self) -> dict:
        out = {}
        for which in ("clean", "triggered"):
            rows = [r for r in self.rows if r["set"] == which]
            if not rows:
                continue
            passed = sum(bool(r["pass"]) for r in rows)
            out[f"{which}.asr"] = passed / len(rows)
            for key in ("detector_score", "similarity", "mse", "ssim", "psnr", "ref_similarity"):
                out[f"{which}.{key}_mean"], out[f"{which}.{key}_std"] = _mean_std([r[key] for r in rows])
        return out

    def to_text(self) -> str:
        lines = ["# evaluation report", f"asr: {_fmt(self.asr)}"]
        lines += [f"config.{k}: {_fmt(v)}" for k, v in sorted(self.config.items())]
        lines += [f"summary.{k}: {_fmt(v)}" for k, v in sorted(self.summary.items())]
        lines.append(f"perceptual: {'none' if self.perceptual is None else self.perceptual}")
        lines.append("")
        lines.append("\t".join(self.COLUMNS))
        for r in self.rows:
            lines.append("\t".join(_fmt(r[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_fmt(r[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        header, _, table = text.partition("\n\n")
        asr, config, summary = math.nan, {}, {}
        for line in header.splitlines():
            if line.startswith("#") or ": " not in line:
                continue
            key, value = line.split(": ", 1)
            if key == "asr":
                asr = float(value)
            elif key.startswith("config."):
                config[key[7:]] = value
            elif key.startswith("summary."):
                summary[key[8:]] = float(value)
        rows = []
        table_lines = table.strip().splitlines()
        cols = table_lines[0].split("\t")
        for line in table_lines[1:]:
            vals = dict(zip(cols, line.split("\t")))
            row = {"set": vals["set"], "index": int(vals["index"]), "pass": vals["pass"] == "1"}
            for c in cols:
                if c not in row:
                    row[c] = float(vals[c])
            rows.append(row)
        return cls(asr=asr, rows=rows, summary=summary, config=config)
