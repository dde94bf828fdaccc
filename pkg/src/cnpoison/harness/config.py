"""Run configuration: nested dataclasses addressed by dotted keys.

File format is one ``key = value`` per line; ``#`` starts a comment.
Every key has a default, so an empty file is a valid config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

OUT_ENV = "CNPOISON_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass
class CorpusSection:
    n: int = 1000
    n_val: int = 50
    n_test: int = 100
    seed: int = 0
    size: int = 32
    classes: str = "circle,square,triangle,cross"


@dataclass
class EdgeSection:
    blur_sigma: float = 0.7
    threshold: float = 0.05


@dataclass
class TriggerSection:
    glyph: str = ""
    area_fraction: float = 0.10
    placement: str = "bottom-right"
    strength: float = 1.0
    mode: str = "image"


@dataclass
class PoisonSection:
    fraction: float = 0.05
    seed: int = 0
    strength: float = 1.0
    target: str = ""


@dataclass
class ScheduleSection:
    T: int = 250
    beta_start: float = 1e-4
    beta_end: float = 0.04


@dataclass
class ModelSection:
    widths: str = "32,64,128"
    emb_dim: int = 64
    seed: int = 0


@dataclass
class BackboneSection:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    path: str = ""


@dataclass
class TrainSection:
    epochs: int = 100
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    lr_min: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    corpus: str = "poisoned"
    val_steps: int = 50
    early_stop: bool = True
    path: str = ""


@dataclass
class DetectorSection:
    epochs: int = 4
    lr: float = 1e-3
    seed: int = 0
    path: str = ""


@dataclass
class SamplerSection:
    kind: str = "ddim"
    steps: int = 50
    scale: float = 1.0
    seed: int = 0


@dataclass
class EvalSection:
    tau_c: float = 0.7
    tau_s: float = 0.7
    n_samples: int = 100
    batch_size: int = 100
    grid: bool = True


@dataclass
class SampleSection:
    n: int = 16
    triggered: bool = True


@dataclass
class SweepSection:
    axis: str = "conditioning_scale"
    values: str = ""


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    edge: EdgeSection = field(default_factory=EdgeSection)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    train: TrainSection = field(default_factory=TrainSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sample: SampleSection = field(default_factory=SampleSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # --------------------------------------------------------------- access
    def items(self) -> list[tuple[str, object]]:
        out = []
        for sec in fields(self):
            section = getattr(self, sec.name)
            for f in fields(section):
                out.append((f"{sec.name}.{f.name}", getattr(section, f.name)))
        return out

    def get(self, key: str):
        sec, name = _split(key)
        return getattr(getattr(self, sec), name)

    def set(self, key: str, raw) -> None:
        sec, name = _split(key)
        section = getattr(self, sec)
        ftype = {f.name: f.type for f in fields(section)}[name]
        setattr(section, name, _coerce(key, raw, ftype))

    def with_value(self, key: str, value) -> "RunConfig":
        new = copy_config(self)
        new.set(key, value)
        return new

    def diff(self, other: "RunConfig") -> list[str]:
        theirs = dict(other.items())
        return [k for k, v in self.items() if theirs[k] != v]

    # ---------------------------------------------------------------- text
    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.items())

    def digest(self, sections: tuple[str, ...] | None = None) -> str:
        lines = [
            f"{k} = {_render(v)}" for k, v in self.items()
            if sections is None or k.split(".")[0] in sections
        ]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    @property
    def out_dir(self) -> Path:
        p = Path(self.run.out_dir)
        if not p.is_absolute():
            p = Path(os.environ.get(OUT_ENV, ".")) / p
        return p

    # ------------------------------------------------------------ validation
    def validate(self, check_paths: bool = True) -> "RunConfig":
        err = []
        if self.corpus.n < len(self.class_names):
            err.append("corpus.n must be >= number of classes")
        if self.corpus.size < 8 or self.corpus.size % 8:
            err.append("corpus.size must be a multiple of 8 and >= 8")
        if not 0.0 <= self.poison.fraction < 1.0:
            err.append("poison.fraction must be in [0, 1)")
        for key in ("trigger.strength", "poison.strength"):
            if not 0.0 <= self.get(key) <= 1.0:
                err.append(f"{key} must be in [0, 1]")
        if not 0.0 < self.trigger.area_fraction < 1.0:
            err.append("trigger.area_fraction must be in (0, 1)")
        if self.trigger.mode not in ("image", "cond"):
            err.append("trigger.mode must be 'image' or 'cond'")
        if self.sampler.kind not in ("ddim", "ancestral"):
            err.append("sampler.kind must be 'ddim' or 'ancestral'")
        if not 1 <= self.sampler.steps <= self.schedule.T:
            err.append(f"sampler.steps must be in [1, {self.schedule.T}]")
        if not 1 <= self.train.val_steps <= self.schedule.T:
            err.append(f"train.val_steps must be in [1, {self.schedule.T}]")
        if self.train.lr_schedule not in ("constant", "cosine"):
            err.append("train.lr_schedule must be 'constant' or 'cosine'")
        if not 0.0 < self.train.lr_min <= self.train.lr:
            err.append("train.lr_min must be in (0, train.lr]")
        if self.train.corpus not in ("poisoned", "clean"):
            err.append("train.corpus must be 'poisoned' or 'clean'")
        for key in ("eval.tau_c", "eval.tau_s"):
            if not 0.0 < self.get(key) < 1.0:
                err.append(f"{key} must be in (0, 1)")
        if len(self.widths) != 3:
            err.append("model.widths must list three comma-separated integers")
        if self.sweep.axis not in SWEEP_AXES:
            err.append(f"sweep.axis must be one of {', '.join(SWEEP_AXES)}")
        if check_paths:
            for key in ("trigger.glyph", "poison.target"):
                path = self.get(key)
                if path and not Path(path).is_file():
                    err.append(f"{key}: file not found: {path}")
        if err:
            raise ConfigError("; ".join(err))
        return self

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(c.strip() for c in self.corpus.classes.split(",") if c.strip())

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self.model.widths.split(","))


SWEEP_AXES = ("trigger_strength", "conditioning_scale", "inference_steps", "poison_fraction")


def valid_keys() -> list[str]:
    return [k for k, _ in RunConfig().items()]


def _split(key: str) -> tuple[str, str]:
    if key not in valid_keys():
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
    sec, name = key.split(".", 1)
    return sec, name


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw, ftype):
    ftype = ftype if isinstance(ftype, str) else ftype.__name__
    if not isinstance(raw, str):
        raw = _render(raw)
    raw = raw.strip()
    try:
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ftype}") from None
    return raw


def copy_config(cfg: RunConfig) -> RunConfig:
    return RunConfig(**{f.name: dataclasses.replace(getattr(cfg, f.name)) for f in fields(cfg)})


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)
    return cfg


def load_config(path=None, overrides: list[str] = ()) -> RunConfig:
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config(path.read_text(), str(path))
    else:
        cfg = RunConfig()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg
