"""The full desk experiment behind the acceptance numbers.

One backbone and one frozen detector are shared by three control
branches: poisoned at 5%, poisoned at 1%, and trained on the clean corpus
for the same number of epochs as the 5% branch.  The 5% branch is then
evaluated and swept along the three inference-time axes.

Every stage is skipped when its output already exists, so an interrupted
run picks up where it stopped.  Wall-clock per stage is kept in
``timings.json`` and the collected numbers in ``summary.json``.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

from .. import evaluation
from . import experiment as ex
from . import pipeline
from . import training as tr
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config

log = logging.getLogger(__name__)

SWEEP_AXES = ("conditioning_scale", "trigger_strength", "inference_steps")


class _Clock:
    def __init__(self, path: Path):
        self.path = path
        self.times = json.loads(path.read_text()) if path.is_file() else {}

    def run(self, name: str, done: bool, fn):
        if done and name in self.times:
            log.info("desk: %s cached", name)
            return
        log.info("desk: %s", name)
        t0 = time.perf_counter()
        fn()
        self.times[name] = time.perf_counter() - t0
        self.path.write_text(json.dumps(self.times, indent=1, sort_keys=True) + "\n")


def configs(root, overrides=()) -> dict[str, RunConfig]:
    root = Path(root)
    base = list(overrides)
    p05 = load_config(None, base + [f"run.out_dir={root / 'p05'}", "poison.fraction=0.05"])
    shared = [f"backbone.path={pipeline.layout(p05).backbone(p05)}",
              f"detector.path={pipeline.layout(p05).detector(p05)}"]
    p01 = load_config(None, base + shared + [f"run.out_dir={root / 'p01'}", "poison.fraction=0.01"])
    clean = load_config(None, base + shared + [f"run.out_dir={root / 'clean'}", "train.corpus=clean"])
    return {"p05": p05, "p01": p01, "clean": clean}


def _control_epochs(cfg: RunConfig) -> int:
    return int(load_checkpoint(pipeline.layout(cfg).control(cfg)).meta["epochs"])


def _branch(clock: _Clock, name: str, cfg: RunConfig) -> None:
    lay = pipeline.layout(cfg)
    clock.run(f"{name}.gen_data", (lay.clean / "DIGEST").is_file(), lambda: pipeline.gen_data(cfg))
    if cfg.train.corpus == "poisoned":
        clock.run(f"{name}.poison", (lay.poisoned / "DIGEST").is_file(), lambda: pipeline.poison(cfg))
    clock.run(f"{name}.train_control", lay.control(cfg).is_file(), lambda: pipeline.train_control(cfg))
    clock.run(f"{name}.eval", (lay.eval_dir / "report.txt").is_file(), lambda: pipeline.evaluate(cfg))


def run_desk(root, overrides=(), sweeps=SWEEP_AXES) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfgs = configs(root, overrides)
    clock = _Clock(root / "timings.json")
    p05 = cfgs["p05"]
    lay = pipeline.layout(p05)

    clock.run("p05.gen_data", (lay.clean / "DIGEST").is_file(), lambda: pipeline.gen_data(p05))
    clock.run("p05.train_backbone", _complete(p05), lambda: pipeline.train_backbone(p05, resume=True))
    clock.run("p05.train_detector", lay.detector(p05).is_file(), lambda: pipeline.train_detector(p05))
    _branch(clock, "p05", p05)
    _branch(clock, "p01", cfgs["p01"])
    # the clean branch gets the same epoch budget the poisoned branch used
    cfgs["clean"].set("train.epochs", _control_epochs(p05))
    cfgs["clean"].set("train.early_stop", False)
    _branch(clock, "clean", cfgs["clean"])
    for axis in sweeps:
        point = p05.with_value("sweep.axis", axis)
        csv = lay.sweep_dir / f"{axis}.csv"
        clock.run(f"p05.sweep.{axis}", csv.is_file(), lambda: pipeline.sweep(point))

    summary = summarize(root, cfgs, clock.times, sweeps)
    (root / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def _complete(cfg: RunConfig) -> bool:
    path = pipeline.layout(cfg).backbone(cfg)
    return path.is_file() and int(load_checkpoint(path).meta.get("epochs", 0)) >= cfg.backbone.epochs


def summarize(root: Path, cfgs: dict[str, RunConfig], times: dict, sweeps=SWEEP_AXES) -> dict:
    out: dict = {"timings": times}
    for name, cfg in cfgs.items():
        lay = pipeline.layout(cfg)
        report = evaluation.EvalReport.from_text((lay.eval_dir / "report.txt").read_text())
        s = report.summary
        out[name] = {
            "asr": report.asr,
            "clean_false_asr": s["clean.asr"],
            "clean_ssim": s["clean.ssim_mean"],
            "triggered_score": s["triggered.detector_score_mean"],
            "triggered_similarity": s["triggered.similarity_mean"],
            "control_epochs": _control_epochs(cfg),
            "clean_detector_fpr": sum(
                r["detector_score"] > cfg.eval.tau_c for r in report.rows if r["set"] == "clean"
            ) / sum(r["set"] == "clean" for r in report.rows),
        }
    p05 = cfgs["p05"]
    out["sweeps"] = {
        axis: ex.read_sweep_csv(pipeline.layout(p05).sweep_dir / f"{axis}.csv") for axis in sweeps
    }
    backbone_stages = ("p05.gen_data", "p05.train_backbone", "p05.train_detector", "p05.poison",
                       "p05.train_control", "p05.eval")
    out["end_to_end_seconds"] = sum(times.get(k, 0.0) for k in backbone_stages)
    out["backbone_losses"] = [
        float(line.split(",")[1])
        for line in pipeline.layout(p05).backbone_log.read_text().splitlines()[1:]
    ]
    out["model_digest"] = tr.scoped_digest(p05, tr.CONTROL_KEYS)
    return out
