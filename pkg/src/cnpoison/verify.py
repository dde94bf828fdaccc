"""Finite-difference gradient checks and structural invariants.

Every differentiable op is compared against central differences in
float64 over several random seeds.  The whole denoiser pair is spot
checked on a sample of parameter entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffusion, gradcore as gc, nets
from .gradcore import Tensor

OP_RTOL = 1e-4
MODEL_RTOL = 1e-3


@dataclass
class VerifyReport:
    count: int = 0
    failures: list[str] = field(default_factory=list)
    worst: dict[str, float] = field(default_factory=dict)

    def record(self, name: str, ok: bool, err: float = 0.0, detail: str = "") -> None:
        self.count += 1
        self.worst[name] = max(self.worst.get(name, 0.0), err)
        if not ok:
            self.failures.append(f"{name}: {detail or f'error {err:.3g}'}")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_gradients(fn: Callable[..., Tensor], inputs: list[np.ndarray]) -> float:
    """Max relative error over all inputs of d sum(fn(*x) * r) / dx."""
    with gc.precision(np.float64):
        ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
        out = fn(*ts)
        r = np.random.default_rng(1234).standard_normal(out.shape)
        loss = gc.reduce_sum(out * Tensor(r)) if out.ndim else out
        loss.backward()

        def value() -> float:
            o = fn(*[Tensor(t.data) for t in ts])
            return float((o.data * r).sum()) if o.ndim else float(o.data)

        return max(relative_error(t.grad, numeric_grad(value, t.data)) for t in ts)


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    n = rng.standard_normal
    idx = rng.integers(0, 5, size=6)
    return {
        "add_broadcast": (gc.add, [n((3, 4)), n((4,))]),
        "sub": (lambda a, b: a - b, [n((2, 3)), n((2, 1))]),
        "mul_broadcast": (gc.mul, [n((2, 3, 4)), n((3, 1))]),
        "div": (lambda a, b: a / b, [n((3, 3)), _away_from_zero(rng, (3, 3), 0.5)]),
        "neg": (gc.neg, [n((4,))]),
        "reciprocal": (gc.reciprocal, [_away_from_zero(rng, (5,), 0.5)]),
        "square": (gc.square, [n((3, 2))]),
        "silu": (gc.silu, [n((10,)) * 3]),
        "sigmoid": (gc.sigmoid, [n((10,)) * 3]),
        "relu": (gc.relu, [_away_from_zero(rng, (10,))]),
        "reduce_sum_axis": (lambda a: gc.reduce_sum(a, axis=1, keepdims=True), [n((3, 4, 2))]),
        "reduce_mean": (lambda a: gc.reduce_mean(a, axis=(0, 2)), [n((3, 4, 2))]),
        "mse_loss": (lambda a: gc.mse_loss(a, np.ones((3, 4))), [n((3, 4))]),
        "bce_with_logits": (lambda a: gc.bce_with_logits(a, (np.arange(6) % 2).astype(float)), [n((6,)) * 4]),
        "reshape": (lambda a: gc.reshape(a, (6, 2)), [n((3, 4))]),
        "transpose": (lambda a: gc.transpose(a, (2, 0, 1)), [n((2, 3, 4))]),
        "getitem": (lambda a: gc.getitem(a, (idx % 4, slice(1, 3))), [n((4, 3))]),
        "concat": (lambda a, b: gc.concat([a, b], axis=1), [n((2, 3, 2)), n((2, 1, 2))]),
        "embedding": (lambda t: gc.embedding(t, idx), [n((5, 3))]),
        "matmul": (gc.matmul, [n((3, 4)), n((4, 2))]),
        "linear": (gc.linear, [n((3, 5)), n((4, 5)), n((4,))]),
        "conv2d_pad1": (lambda x, w, b: gc.conv2d(x, w, b, padding=1), [n((2, 3, 5, 5)), n((4, 3, 3, 3)), n((4,))]),
        "conv2d_stride2": (lambda x, w: gc.conv2d(x, w, stride=2, padding=1), [n((1, 2, 6, 6)), n((3, 2, 3, 3))]),
        "conv2d_1x1": (lambda x, w, b: gc.conv2d(x, w, b), [n((2, 3, 4, 4)), n((2, 3, 1, 1)), n((2,))]),
        "upsample_nearest2x": (gc.upsample_nearest2x, [n((2, 2, 3, 3))]),
        "avg_pool2d": (gc.avg_pool2d, [n((2, 2, 4, 4))]),
        "group_norm": (lambda x, w, b: gc.group_norm(x, 2, w, b), [n((2, 4, 3, 3)), n((4,)), n((4,))]),
    }


def check_ops(report: VerifyReport, seeds: int = 10) -> None:
    for seed in range(seeds):
        for name, (fn, inputs) in op_cases(np.random.default_rng(seed)).items():
            err = check_gradients(fn, inputs)
            report.record(f"grad/{name}", err < OP_RTOL, err, f"seed {seed}: relative error {err:.3g}")


def _tiny_pair(seed: int) -> tuple[nets.ModelPair, nets.NetConfig]:
    cfg = nets.NetConfig(image_size=8, widths=(8, 8, 8), emb_dim=8, num_classes=2, num_timesteps=20)
    pair = nets.build_pair(cfg, seed)
    # nudge the zero projections so gradients reach every control parameter
    rng = np.random.default_rng(seed + 99)
    for conv in pair.control.zero:
        conv.weight.data[...] = 0.1 * rng.standard_normal(conv.weight.data.shape)
    return pair, cfg


def check_model(report: VerifyReport, n_params: int = 20, seed: int = 0) -> None:
    with gc.precision(np.float64):
        pair, cfg = _tiny_pair(seed)
        pair.backbone.astype(np.float64)
        pair.control.astype(np.float64)
        pair.backbone.set_trainable(True)
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
        cond = (rng.random((2, 1, 8, 8)) > 0.7).astype(float)
        label = np.array([0, 1])
        sched = diffusion.make_schedule(cfg.num_timesteps)

        def loss_value() -> Tensor:
            return diffusion.ldm_loss(lambda z, t, l, c: pair(z, t, l, c, 0.7), x0, cond, label,
                                      np.random.default_rng(7), sched)

        loss = loss_value()
        loss.backward()
        named = list(pair.backbone.named_parameters("backbone.")) + list(pair.control.named_parameters("control."))
        picks = rng.choice(len(named), size=n_params, replace=len(named) < n_params)
        for k in picks:
            name, p = named[k]
            i = int(rng.integers(p.data.size))
            flat = p.data.reshape(-1)
            old = flat[i]
            h = 1e-5
            flat[i] = old + h
            up = loss_value().item()
            flat[i] = old - h
            down = loss_value().item()
            flat[i] = old
            num = (up - down) / (2 * h)
            ana = float(p.grad.reshape(-1)[i])
            err = abs(ana - num) / max(abs(num), abs(ana), 1e-6)
            report.record("model/param_grad", err < MODEL_RTOL, err, f"{name}[{i}]: analytic {ana:.6g} vs numeric {num:.6g}")


def check_invariants(report: VerifyReport) -> None:
    cfg = nets.NetConfig(image_size=8, widths=(8, 8, 8), emb_dim=8, num_classes=2, num_timesteps=20)
    pair = nets.build_pair(cfg, 3)
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 1, 8, 8)).astype(np.float32)
    t = rng.integers(1, 21, 4)
    y = rng.integers(0, 2, 4)
    c = (rng.random((4, 1, 8, 8)) > 0.5).astype(np.float32)
    with gc.no_grad():
        base = pair.denoise_backbone(z, t, y).data
        for scale in (0.0, 0.5, 1.0):
            comb = pair.denoise_combined(z, t, y, c, scale).data
            report.record("invariant/zero_init_equivalence", np.array_equal(base, comb),
                          detail=f"scale {scale}: combined differs from backbone")
    enc_b = pair.backbone.encoder.state_dict()
    enc_c = pair.control.encoder.state_dict()
    report.record("invariant/encoder_copy", all(np.array_equal(enc_b[k], enc_c[k]) for k in enc_b),
                  detail="control encoder is not a copy of the backbone encoder")
    sched = diffusion.make_schedule()
    ab = sched.alpha_bar
    report.record("invariant/schedule_monotone", bool(np.all(np.diff(ab) < 0) and ab.min() > 0 and ab.max() < 1),
                  detail="alpha_bar not strictly decreasing in (0, 1)")
    report.record("invariant/schedule_terminal", bool(ab[-1] < 0.05), float(ab[-1]),
                  detail=f"alpha_bar_T = {ab[-1]:.4f} is not below 0.05")
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    loss = gc.reduce_sum(x * x)
    loss.backward()
    try:
        loss.backward()
        freed = False
    except RuntimeError:
        freed = True
    report.record("invariant/graph_freed", freed, detail="second backward on a freed graph did not raise")


def run_all(seeds: int = 10) -> VerifyReport:
    report = VerifyReport()
    check_ops(report, seeds)
    check_model(report)
    check_invariants(report)
    return report


if __name__ == "__main__":
    import time

    t0 = time.perf_counter()
    rep = run_all()
    for name, err in sorted(rep.worst.items()):
        print(f"{name:40s} worst {err:.2e}")
    print(f"{rep.count} checks, {len(rep.failures)} failures, {time.perf_counter() - t0:.1f}s")
    for f in rep.failures:
        print("FAIL", f)
