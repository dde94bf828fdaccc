"""On-disk pipeline stages shared by the CLI and the experiment scripts.

Every stage reads its inputs from, and writes its outputs under, the run
directory of a config.  Artifacts are pure functions of the config.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import datagen, imaging, nets
from . import experiment as ex
from . import training as tr
from .checkpoint import save_checkpoint
from .config import ConfigError, RunConfig

log = logging.getLogger(__name__)

CORPUS_KEYS = ("corpus", "edge")
POISON_KEYS = CORPUS_KEYS + ("trigger.glyph", "trigger.area_fraction", "trigger.placement", "trigger.mode", "poison")


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def clean(self) -> Path:
        return self.root / "corpus" / "clean"

    @property
    def poisoned(self) -> Path:
        return self.root / "corpus" / "poisoned"

    def backbone(self, cfg: RunConfig) -> Path:
        return Path(cfg.backbone.path) if cfg.backbone.path else self.root / "backbone.cplb"

    def detector(self, cfg: RunConfig) -> Path:
        return Path(cfg.detector.path) if cfg.detector.path else self.root / "detector.cplb"

    def control(self, cfg: RunConfig) -> Path:
        return Path(cfg.train.path) if cfg.train.path else self.root / "control.cplb"

    @property
    def backbone_log(self) -> Path:
        return self.root / "backbone_loss.csv"

    @property
    def control_log(self) -> Path:
        return self.root / "control_log.csv"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"

    @property
    def sweep_dir(self) -> Path:
        return self.root / "sweep"

    @property
    def samples_dir(self) -> Path:
        return self.root / "samples"


def layout(cfg: RunConfig) -> Layout:
    return Layout(cfg.out_dir)


def _stamp(directory: Path, digest: str) -> None:
    (directory / "DIGEST").write_text(digest + "\n")


def _load_stamped(directory: Path, digest: str, what: str, hint: str) -> datagen.CorpusSplit:
    stamp = directory / "DIGEST"
    if not stamp.is_file():
        raise ConfigError(f"{what} not found at {directory}; run `{hint}` first")
    if stamp.read_text().strip() != digest:
        raise ConfigError(f"{what} at {directory} was built from a different config; rerun `{hint}`")
    return datagen.load_corpus(directory)


# ----------------------------------------------------------------- stages
def gen_data(cfg: RunConfig) -> Path:
    out = layout(cfg).clean
    datagen.save_corpus(tr.make_corpus(cfg), out)
    _stamp(out, tr.scoped_digest(cfg, CORPUS_KEYS))
    return out


def load_clean(cfg: RunConfig) -> datagen.CorpusSplit:
    return _load_stamped(layout(cfg).clean, tr.scoped_digest(cfg, CORPUS_KEYS), "clean corpus", "gen-data")


def poison(cfg: RunConfig) -> Path:
    clean = load_clean(cfg)
    out = layout(cfg).poisoned
    datagen.save_corpus(datagen.build_poisoned_corpus(clean, tr.poison_spec(cfg), tr.edge_params(cfg)), out)
    _stamp(out, tr.scoped_digest(cfg, POISON_KEYS))
    return out


def load_training_corpus(cfg: RunConfig) -> datagen.CorpusSplit:
    if cfg.train.corpus == "clean":
        return load_clean(cfg)
    return _load_stamped(layout(cfg).poisoned, tr.scoped_digest(cfg, POISON_KEYS), "poisoned corpus", "poison")


def train_backbone(cfg: RunConfig, resume: bool = False) -> tr.BackboneResult:
    lay = layout(cfg)
    path = lay.backbone(cfg)
    res = tr.train_backbone(cfg, load_clean(cfg), path=path, resume=path if resume and path.is_file() else None)
    previous = []
    if resume and lay.backbone_log.is_file():
        previous = lay.backbone_log.read_text().strip().splitlines()[1:]
    lines = previous + [f"{len(previous) + i + 1},{loss!r}" for i, loss in enumerate(res.losses)]
    lay.backbone_log.write_text("epoch,loss\n" + "".join(line + "\n" for line in lines))
    return res


def train_detector(cfg: RunConfig) -> Path:
    det = tr.fit_detector(cfg, load_clean(cfg))
    return save_checkpoint(tr.detector_checkpoint(cfg, det), layout(cfg).detector(cfg))


def load_detector(cfg: RunConfig):
    path = layout(cfg).detector(cfg)
    if not path.is_file():
        raise ConfigError(f"detector checkpoint not found at {path}; run `train-detector` first")
    return tr.load_detector(cfg, path)


def load_backbone(cfg: RunConfig) -> nets.BackboneDenoiser:
    path = layout(cfg).backbone(cfg)
    if not path.is_file():
        raise ConfigError(f"backbone checkpoint not found at {path}; run `train-backbone` first")
    return tr.load_backbone(cfg, path)


def train_control(cfg: RunConfig) -> tr.ControlResult:
    lay = layout(cfg)
    return tr.train_control(cfg, load_backbone(cfg), load_training_corpus(cfg), load_detector(cfg),
                            path=lay.control(cfg), log_path=lay.control_log)


def load_pair(cfg: RunConfig) -> nets.ModelPair:
    backbone = load_backbone(cfg)
    path = layout(cfg).control(cfg)
    if not path.is_file():
        raise ConfigError(f"control checkpoint not found at {path}; run `train-control` first")
    return nets.ModelPair(backbone, tr.load_control(cfg, path, backbone))


def eval_inputs(cfg: RunConfig, pair: nets.ModelPair | None = None, detector=None) -> ex.EvalInputs:
    return ex.EvalInputs(
        pair=load_pair(cfg) if pair is None else pair,
        detector=load_detector(cfg) if detector is None else detector,
        records=ex.eval_records(cfg, load_clean(cfg)),
        target=tr.target(cfg),
    )


def sample(cfg: RunConfig) -> Path:
    pair = load_pair(cfg)
    recs = load_clean(cfg).test[:cfg.sample.n]
    if cfg.sample.triggered:
        recs = datagen.make_triggered_eval_conditions(recs, tr.patch(cfg), tr.edge_params(cfg), cfg.trigger.mode)
    _, c, y = tr.batch_arrays(recs)
    gens = tr.generate(pair, c, y, cfg, [(cfg.sampler.seed, 0, i) for i in range(len(recs))])
    out = layout(cfg).samples_dir
    out.mkdir(parents=True, exist_ok=True)
    for i, g in enumerate(gens):
        imaging.save_png(g, out / f"sample_{i:04d}.png")
    imaging.save_png(imaging.image_grid(list(gens), ncols=min(8, len(gens))), out / "grid.png")
    return out


def evaluate(cfg: RunConfig):
    return ex.run_eval(cfg, eval_inputs(cfg), layout(cfg).eval_dir)


def sweep(cfg: RunConfig) -> Path:
    """Sweep ``sweep.axis`` over ``sweep.values`` (or the axis defaults)."""
    axis = cfg.sweep.axis
    values = ex.parse_values(axis, cfg.sweep.values, cfg.schedule.T)
    base = eval_inputs(cfg) if axis != "poison_fraction" else None
    detector = base.detector if base is not None else load_detector(cfg)

    def inputs_for(point: RunConfig) -> ex.EvalInputs:
        if base is not None:
            return base
        return ex.EvalInputs(fraction_pair(point, detector), detector,
                             ex.eval_records(point, load_clean(point)), tr.target(point))

    result = ex.run_sweep(cfg, axis, values, inputs_for)
    return result.write(layout(cfg).sweep_dir)


def fraction_pair(point: RunConfig, detector) -> nets.ModelPair:
    """Control branch trained at ``point``'s poison fraction, cached under the sweep dir."""
    lay = layout(point)
    sub = lay.sweep_dir / "poison_fraction" / f"f{point.poison.fraction!r}"
    path = sub / "control.cplb"
    backbone = load_backbone(point)
    if path.is_file():
        return nets.ModelPair(backbone, tr.load_control(point, path, backbone))
    clean = load_clean(point)
    corpus = datagen.build_poisoned_corpus(clean, tr.poison_spec(point), tr.edge_params(point))
    res = tr.train_control(point, backbone, corpus, detector, path=path, log_path=sub / "control_log.csv")
    return nets.ModelPair(backbone, res.control)


def corpus_stats(corpus: datagen.CorpusSplit) -> dict:
    labels = np.array([r.label for r in corpus.train])
    return {
        "train": len(corpus.train), "val": len(corpus.val), "test": len(corpus.test),
        "poisoned": sum(r.poisoned for r in corpus.train),
        "class_counts": np.bincount(labels).tolist(),
    }
