"""Evaluation runs and single-axis parameter sweeps over a trained model."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .. import datagen, evaluation, imaging, nets
from . import training as tr
from .config import ConfigError, RunConfig

log = logging.getLogger(__name__)

SWEEP_KEYS = {
    "trigger_strength": "trigger.strength",
    "conditioning_scale": "sampler.scale",
    "inference_steps": "sampler.steps",
    "poison_fraction": "poison.fraction",
}
SWEEP_COLUMNS = ("axis", "value", "asr", "mean_detector_score", "mean_similarity", "mean_ssim_clean")


def default_values(axis: str, T: int = 250) -> list:
    if axis in ("trigger_strength", "conditioning_scale"):
        return [round(0.1 * i, 10) for i in range(1, 11)]
    if axis == "inference_steps":
        return [s for s in range(10, 101, 10) if s <= T]
    if axis == "poison_fraction":
        return [0.01, 0.05, 0.10]
    raise ConfigError(f"unknown sweep axis {axis!r}")


def check_value(axis: str, value, T: int) -> None:
    if axis in ("trigger_strength", "conditioning_scale"):
        ok = 0.0 <= value <= 1.0
    elif axis == "inference_steps":
        ok = float(value).is_integer() and 1 <= value <= T
    else:
        ok = 0.0 <= value < 1.0
    if not ok:
        raise ConfigError(f"sweep value {value!r} out of range for axis {axis}")


def parse_values(axis: str, text: str, T: int) -> list:
    if not text.strip():
        values = default_values(axis, T)
    else:
        try:
            values = [float(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"sweep.values must be comma-separated numbers, got {text!r}") from None
    if axis == "inference_steps":
        for v in values:
            check_value(axis, v, T)
        values = [int(v) for v in values]
    for v in values:
        check_value(axis, v, T)
    if len(set(values)) != len(values):
        raise ConfigError("sweep.values contains duplicates")
    return sorted(values)


# ------------------------------------------------------------------ eval
@dataclass
class EvalInputs:
    """Everything a generation pass needs apart from the sampler settings."""

    pair: nets.ModelPair
    detector: evaluation.TargetDetector
    records: list[datagen.DatasetRecord]
    target: np.ndarray


def eval_records(cfg: RunConfig, corpus: datagen.CorpusSplit) -> list[datagen.DatasetRecord]:
    recs = corpus.test[:cfg.eval.n_samples]
    if len(recs) < cfg.eval.n_samples:
        raise ConfigError(f"eval.n_samples={cfg.eval.n_samples} exceeds the {len(corpus.test)} test records")
    return recs


def _seeds(cfg: RunConfig, n: int) -> list[tuple[int, int, int]]:
    # clean and triggered draws share seeds so the two sets differ only in the condition
    return [(cfg.sampler.seed, 0, i) for i in range(n)]


def generate_pair(cfg: RunConfig, inp: EvalInputs, clean: bool = True, triggered: bool = True):
    recs = inp.records
    _, c, y = tr.batch_arrays(recs)
    seeds = _seeds(cfg, len(recs))
    out = {}
    if clean:
        out["clean"] = tr.generate(inp.pair, c, y, cfg, seeds)
    if triggered:
        trig = datagen.make_triggered_eval_conditions(recs, tr.patch(cfg), tr.edge_params(cfg), cfg.trigger.mode)
        _, tc, _ = tr.batch_arrays(trig)
        out["triggered"] = tr.generate(inp.pair, tc, y, cfg, seeds)
    return out


def config_echo(cfg: RunConfig, inp: EvalInputs) -> dict:
    return {
        "digest": cfg.digest(),
        "model_digest": tr.scoped_digest(cfg, tr.CONTROL_KEYS),
        "detector_digest": inp.detector.digest(),
        "backbone_weights": inp.pair.backbone.digest(),
        "control_weights": inp.pair.control.digest(),
        "poison.fraction": cfg.poison.fraction,
        "trigger.strength": cfg.trigger.strength,
        "trigger.mode": cfg.trigger.mode,
        "sampler.kind": cfg.sampler.kind,
        "sampler.steps": cfg.sampler.steps,
        "sampler.scale": cfg.sampler.scale,
        "sampler.seed": cfg.sampler.seed,
        "run.seed": cfg.run.seed,
        "eval.tau_c": cfg.eval.tau_c,
        "eval.tau_s": cfg.eval.tau_s,
        "eval.n_samples": len(inp.records),
    }


def build_report(cfg: RunConfig, inp: EvalInputs, gens: dict) -> evaluation.EvalReport:
    refs = np.stack([r.image for r in inp.records])
    rows = []
    for which in ("clean", "triggered"):
        g = gens[which]
        asr = evaluation.compute_asr(g, inp.detector, inp.target, cfg.eval.tau_c, cfg.eval.tau_s)
        q = evaluation.quality_report(g, refs, inp.detector)["per_sample"]
        for i in range(len(g)):
            rows.append({
                "set": which,
                "index": i,
                "detector_score": float(asr["scores"][i]),
                "similarity": float(asr["similarities"][i]),
                "pass": bool(asr["passed"][i]),
                "mse": q["mse"][i],
                "ssim": q["ssim"][i],
                "psnr": q["psnr"][i],
                "ref_similarity": q["similarity"][i],
            })
    report = evaluation.EvalReport(asr=0.0, rows=rows, config=config_echo(cfg, inp))
    report.summary = report.recompute_summary()
    report.asr = report.summary["triggered.asr"]
    return report


def run_eval(cfg: RunConfig, inp: EvalInputs, out_dir=None) -> evaluation.EvalReport:
    """Generate paired clean/triggered samples and score them.

    Writes ``report.txt``, ``report.csv`` and (optionally) ``samples.png``
    into ``out_dir`` when given.
    """
    gens = generate_pair(cfg, inp)
    report = build_report(cfg, inp, gens)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.to_text())
        (out / "report.csv").write_text(report.to_csv())
        if cfg.eval.grid:
            k = min(8, len(inp.records))
            refs = np.stack([r.image for r in inp.records[:k]])
            grid = imaging.image_grid(np.concatenate([refs, gens["clean"][:k], gens["triggered"][:k]]), ncols=k)
            imaging.save_png(grid, out / "samples.png")
    return report


# ----------------------------------------------------------------- sweeps
@dataclass
class SweepResult:
    axis: str
    rows: list[dict]
    timings: list[tuple[object, float]]

    def to_csv(self) -> str:
        lines = [",".join(SWEEP_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_cell(r[c]) for c in SWEEP_COLUMNS))
        return "\n".join(lines) + "\n"

    def timing_csv(self) -> str:
        return "value,runtime_s\n" + "".join(f"{_cell(v)},{s:.3f}\n" for v, s in self.timings)

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.axis}.csv"
        path.write_text(self.to_csv())
        (directory / f"{self.axis}.timing.csv").write_text(self.timing_csv())
        return path


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_sweep_csv(path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    cols = lines[0].split(",")
    out = []
    for line in lines[1:]:
        vals = dict(zip(cols, line.split(",")))
        out.append({"axis": vals["axis"], **{c: float(vals[c]) for c in cols if c != "axis"}})
    return out


def run_sweep(
    cfg: RunConfig,
    axis: str,
    values: list,
    inputs_for: Callable[[RunConfig], EvalInputs],
) -> SweepResult:
    """Vary one setting and record ASR and quality at each value.

    ``inputs_for`` maps a per-point config to the model, detector and
    records used there; for every axis except poison fraction it returns
    the same objects, so only the sampler inputs change.  The detector
    must be identical across points.
    """
    if axis not in SWEEP_KEYS:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose one of {', '.join(SWEEP_KEYS)}")
    key = SWEEP_KEYS[axis]
    for v in values:
        check_value(axis, v, cfg.schedule.T)
    rows, timings = [], []
    detector_digest = None
    clean_cache: dict = {}
    for value in sorted(values):
        t0 = time.perf_counter()
        point = cfg.with_value(key, value)
        changed = cfg.diff(point)
        if changed not in ([], [key]):
            raise RuntimeError(f"sweep point changed more than {key}: {changed}")
        inp = inputs_for(point)
        d = inp.detector.digest()
        if detector_digest is None:
            detector_digest = d
        elif d != detector_digest:
            raise RuntimeError("sweep points must share one frozen detector")
        # clean generations ignore trigger strength, so compute them once on that axis
        reuse = axis == "trigger_strength" and "clean" in clean_cache
        gens = generate_pair(point, inp, clean=not reuse)
        if reuse:
            gens["clean"] = clean_cache["clean"]
        elif axis == "trigger_strength":
            clean_cache["clean"] = gens["clean"]
        report = build_report(point, inp, gens)
        s = report.summary
        rows.append({
            "axis": axis,
            "value": point.get(key),
            "asr": report.asr,
            "mean_detector_score": s["triggered.detector_score_mean"],
            "mean_similarity": s["triggered.similarity_mean"],
            "mean_ssim_clean": s["clean.ssim_mean"],
        })
        timings.append((point.get(key), time.perf_counter() - t0))
        log.info("sweep %s=%s asr %.3f", axis, value, report.asr)
    return SweepResult(axis, rows, timings)
