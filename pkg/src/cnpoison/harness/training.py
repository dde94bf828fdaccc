"""Backbone pretraining, control-branch fine-tuning and detector fitting."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import datagen, diffusion, evaluation, gradcore as gc, imaging, nets
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig

log = logging.getLogger(__name__)

BACKBONE_KEYS = ("run.seed", "corpus", "edge", "schedule", "model", "backbone")
CONTROL_KEYS = BACKBONE_KEYS + (
    "trigger.glyph", "trigger.area_fraction", "trigger.placement", "trigger.mode", "poison", "train",
)
DETECTOR_KEYS = ("corpus", "edge", "poison.target", "detector")
# locations and the backbone epoch budget do not change what a checkpoint is;
# the epoch count is recorded in checkpoint metadata instead so training can be extended
UNDIGESTED = ("backbone.epochs",)


class TrainingDiverged(RuntimeError):
    pass


class IntegrityError(RuntimeError):
    pass


class IncompleteCheckpoint(ValueError):
    pass


def scoped_digest(cfg: RunConfig, keys: tuple[str, ...]) -> str:
    import hashlib

    lines = [
        f"{k} = {v!r}" for k, v in cfg.items()
        if not k.endswith(".path") and k not in UNDIGESTED and any(k == p or k.startswith(p + ".") for p in keys)
    ]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


# ------------------------------------------------------------ config helpers
def edge_params(cfg: RunConfig) -> imaging.EdgeParams:
    return imaging.EdgeParams(cfg.edge.blur_sigma, cfg.edge.threshold)


def glyph(cfg: RunConfig) -> np.ndarray:
    return imaging.load_png(cfg.trigger.glyph) if cfg.trigger.glyph else imaging.default_glyph()


def target(cfg: RunConfig) -> np.ndarray:
    img = imaging.load_png(cfg.poison.target) if cfg.poison.target else imaging.default_target()
    img = imaging.to_luminance(img)
    if img.shape != (cfg.corpus.size, cfg.corpus.size):
        raise ValueError(f"target image shape {img.shape} does not match corpus size {cfg.corpus.size}")
    return img


def patch(cfg: RunConfig, strength: float | None = None) -> imaging.TriggerPatch:
    return imaging.TriggerPatch(
        glyph=glyph(cfg),
        area_fraction=cfg.trigger.area_fraction,
        placement=cfg.trigger.placement,
        strength=cfg.trigger.strength if strength is None else strength,
    )


def poison_spec(cfg: RunConfig) -> datagen.PoisonSpec:
    return datagen.PoisonSpec(
        fraction=cfg.poison.fraction,
        patch=patch(cfg, cfg.poison.strength),
        target=target(cfg),
        selection_seed=cfg.poison.seed,
        mode=cfg.trigger.mode,
    )


def schedule(cfg: RunConfig) -> diffusion.NoiseSchedule:
    return diffusion.make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def net_config(cfg: RunConfig) -> nets.NetConfig:
    return nets.NetConfig(
        image_size=cfg.corpus.size,
        widths=cfg.widths,
        emb_dim=cfg.model.emb_dim,
        num_classes=len(cfg.class_names),
        num_timesteps=cfg.schedule.T,
    )


def make_corpus(cfg: RunConfig) -> datagen.CorpusSplit:
    return datagen.gen_shapes_corpus(
        n=cfg.corpus.n, seed=cfg.corpus.seed, image_size=cfg.corpus.size, classes=cfg.class_names,
        n_val=cfg.corpus.n_val, n_test=cfg.corpus.n_test, edge=edge_params(cfg),
    )


def batch_arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Model-space images, conditioning maps and labels as float32/int arrays."""
    x = diffusion.to_model_space(np.stack([r.image for r in records])[:, None]).astype(np.float32)
    c = np.stack([r.cond for r in records])[:, None].astype(np.float32)
    y = np.array([r.label for r in records], dtype=np.int64)
    return x, c, y


def _meta_schedule(cfg: RunConfig) -> tuple[int, float, float]:
    return cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end


# ------------------------------------------------------------------ backbone
@dataclass
class BackboneResult:
    model: nets.BackboneDenoiser
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def backbone_checkpoint(cfg: RunConfig, model: nets.BackboneDenoiser, epochs: int) -> Checkpoint:
    return Checkpoint("backbone", model.state_dict(), _meta_schedule(cfg),
                      scoped_digest(cfg, BACKBONE_KEYS), {"epochs": str(epochs)})


def load_backbone(cfg: RunConfig, path) -> nets.BackboneDenoiser:
    ckpt = load_checkpoint(path, kind="backbone", digest=scoped_digest(cfg, BACKBONE_KEYS))
    done = int(ckpt.meta.get("epochs", 0))
    if done != cfg.backbone.epochs:
        raise IncompleteCheckpoint(
            f"{path}: backbone trained for {done} epochs, config asks for {cfg.backbone.epochs}; "
            "run train-backbone --resume")
    model = nets.BackboneDenoiser(net_config(cfg), cfg.model.seed)
    model.load_state_dict(ckpt.tensors)
    return model


def train_backbone(cfg: RunConfig, corpus: datagen.CorpusSplit, path=None, resume=None) -> BackboneResult:
    """Pretrain the denoiser alone on clean data.

    ``resume`` is a checkpoint path; training restarts at its recorded
    epoch with fresh optimizer moments and the same per-epoch RNG streams.
    """
    sched = schedule(cfg)
    model = nets.BackboneDenoiser(net_config(cfg), cfg.model.seed)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, kind="backbone", digest=scoped_digest(cfg, BACKBONE_KEYS))
        model.load_state_dict(ckpt.tensors)
        start = int(ckpt.meta.get("epochs", 0))
    opt = gc.AdamW(model.parameters(), lr=cfg.backbone.lr, betas=(cfg.train.beta1, cfg.train.beta2),
                   weight_decay=cfg.backbone.weight_decay, eps=cfg.train.eps)
    records = [r for r in corpus.train if not r.poisoned]
    x, _, y = batch_arrays(records)

    def predict(z, t, label, cond):
        return model(z, t, label)

    losses: list[float] = []
    last_good = model.state_dict()
    for epoch in range(start, cfg.backbone.epochs):
        rng = np.random.default_rng([cfg.run.seed, 1, epoch])
        perm = rng.permutation(len(x))
        total = []
        for s in range(0, len(perm), cfg.backbone.batch_size):
            idx = perm[s:s + cfg.backbone.batch_size]
            loss = diffusion.ldm_loss(predict, x[idx], None, y[idx], rng, sched)
            if not np.isfinite(loss.item()):
                model.load_state_dict(last_good)
                if path is not None:
                    save_checkpoint(backbone_checkpoint(cfg, model, epoch), path)
                raise TrainingDiverged(f"backbone loss became {loss.item()} in epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total.append(loss.item())
        losses.append(float(np.mean(total)))
        last_good = model.state_dict()
        log.info("backbone epoch %d loss %.5f", epoch + 1, losses[-1])
        if path is not None:
            save_checkpoint(backbone_checkpoint(cfg, model, epoch + 1), path)
    return BackboneResult(model, losses, Path(path) if path is not None else None)


def first_batch_loss(cfg: RunConfig, model: nets.BackboneDenoiser, corpus: datagen.CorpusSplit, epoch: int) -> float:
    """Loss of the first minibatch the trainer would see in ``epoch`` (0-based)."""
    x, _, y = batch_arrays([r for r in corpus.train if not r.poisoned])
    rng = np.random.default_rng([cfg.run.seed, 1, epoch])
    idx = rng.permutation(len(x))[:cfg.backbone.batch_size]
    with gc.no_grad():
        loss = diffusion.ldm_loss(lambda z, t, l, c: model(z, t, l), x[idx], None, y[idx], rng, schedule(cfg))
    return loss.item()


# ------------------------------------------------------------------ detector
def detector_checkpoint(cfg: RunConfig, det: evaluation.TargetDetector) -> Checkpoint:
    return Checkpoint("detector", det.state_dict(), _meta_schedule(cfg),
                      scoped_digest(cfg, DETECTOR_KEYS), {"digest": det.digest()})


def fit_detector(cfg: RunConfig, corpus: datagen.CorpusSplit) -> evaluation.TargetDetector:
    clean = np.stack([r.image for r in corpus.train if not r.poisoned])
    return evaluation.train_detector(clean, target(cfg), seed=cfg.detector.seed,
                                     epochs=cfg.detector.epochs, lr=cfg.detector.lr)


def load_detector(cfg: RunConfig, path) -> evaluation.TargetDetector:
    ckpt = load_checkpoint(path, kind="detector", digest=scoped_digest(cfg, DETECTOR_KEYS))
    det = evaluation.TargetDetector(cfg.corpus.size, cfg.detector.seed)
    det.load_state_dict(ckpt.tensors)
    det.set_trainable(False)
    if "digest" in ckpt.meta and det.digest() != ckpt.meta["digest"]:
        raise IntegrityError(f"{path}: detector weights do not match their pinned digest")
    return det


# ------------------------------------------------------------------- control
@dataclass
class ControlResult:
    control: nets.ControlBranch
    log: list[dict] = field(default_factory=list)
    early_stopped: bool = False
    checkpoint: Path | None = None

    @property
    def epochs(self) -> int:
        return len(self.log)


CONTROL_LOG_COLUMNS = ("epoch", "train_loss", "val_asr", "val_mean_score", "val_mean_similarity",
                       "residual_norm", "seconds")


def control_checkpoint(cfg: RunConfig, control: nets.ControlBranch, backbone_digest: str, meta: dict) -> Checkpoint:
    return Checkpoint("control", control.state_dict(), _meta_schedule(cfg), scoped_digest(cfg, CONTROL_KEYS),
                      {"backbone_digest": backbone_digest, **{k: str(v) for k, v in meta.items()}})


def load_control(cfg: RunConfig, path, backbone: nets.BackboneDenoiser) -> nets.ControlBranch:
    ckpt = load_checkpoint(path, kind="control", digest=scoped_digest(cfg, CONTROL_KEYS))
    if ckpt.meta.get("backbone_digest") not in (None, backbone.digest()):
        raise IntegrityError(f"{path}: control branch was trained against a different backbone")
    control = nets.ControlBranch(net_config(cfg), cfg.model.seed + 1)
    control.load_state_dict(ckpt.tensors)
    return control


def generate(predict_pair: nets.ModelPair, cond, labels, cfg: RunConfig, seeds, scale=None, steps=None,
             kind=None) -> np.ndarray:
    """Sample images (N, H, W) in batches of ``eval.batch_size``."""
    sc = diffusion.SamplerConfig(
        kind=cfg.sampler.kind if kind is None else kind,
        steps=cfg.sampler.steps if steps is None else steps,
        scale=cfg.sampler.scale if scale is None else scale,
        seed=cfg.sampler.seed,
    )
    sched = schedule(cfg)

    def predict(z, t, label, c):
        return predict_pair.denoise_combined(z, t, label, c, sc.scale)

    out = []
    bs = cfg.eval.batch_size
    for s in range(0, len(cond), bs):
        out.append(diffusion.sample(predict, cond[s:s + bs], labels[s:s + bs], sc, sched, seeds=seeds[s:s + bs]))
    return np.concatenate(out)[:, 0]


def _probe(cfg: RunConfig, records) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.run.seed, 3])
    _, c, y = batch_arrays(records[:8])
    z = rng.standard_normal(c.shape).astype(np.float32)
    t = np.full(len(c), max(1, cfg.schedule.T // 2))
    return z, t, y, c


def train_control(
    cfg: RunConfig,
    backbone: nets.BackboneDenoiser,
    corpus: datagen.CorpusSplit,
    detector: evaluation.TargetDetector,
    path=None,
    log_path=None,
) -> ControlResult:
    """Fine-tune a control branch against the frozen backbone.

    After every epoch the branch generates from triggered validation
    conditions; training stops once every one of them passes the ASR test.
    """
    sched = schedule(cfg)
    backbone.set_trainable(False)
    frozen = backbone.digest()
    control = nets.ControlBranch(net_config(cfg), cfg.model.seed + 1, backbone)
    pair = nets.ModelPair(backbone, control)
    opt = gc.AdamW(control.parameters(), lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2),
                   weight_decay=cfg.train.weight_decay, eps=cfg.train.eps)
    x, c, y = batch_arrays(corpus.train)
    tgt = target(cfg)
    val_trig = datagen.make_triggered_eval_conditions(corpus.val, patch(cfg, cfg.poison.strength),
                                                      edge_params(cfg), cfg.trigger.mode)
    _, vc, vy = batch_arrays(val_trig)
    val_seeds = [(cfg.sampler.seed, 1, i) for i in range(len(vc))]
    probe = _probe(cfg, val_trig)

    def predict(z, t, label, cond):
        return pair.denoise_combined(z, t, label, cond, 1.0)

    result = ControlResult(control, checkpoint=Path(path) if path is not None else None)
    for epoch in range(cfg.train.epochs):
        t0 = time.perf_counter()
        opt.state.lr = control_lr(cfg, epoch)
        rng = np.random.default_rng([cfg.run.seed, 2, epoch])
        perm = rng.permutation(len(x))
        losses = []
        for s in range(0, len(perm), cfg.train.batch_size):
            idx = perm[s:s + cfg.train.batch_size]
            loss = diffusion.ldm_loss(predict, x[idx], c[idx], y[idx], rng, sched)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"control loss became {loss.item()} in epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if backbone.digest() != frozen:
            raise IntegrityError("backbone parameters changed during control training")
        gens = generate(pair, vc, vy, cfg, val_seeds, scale=1.0, steps=cfg.train.val_steps, kind="ddim")
        asr = evaluation.compute_asr(gens, detector, tgt, cfg.eval.tau_c, cfg.eval.tau_s)
        with gc.no_grad():
            res = pair.control_residuals(probe[0], probe[1], probe[3], probe[2])
        row = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)),
            "val_asr": asr["asr"],
            "val_mean_score": float(asr["scores"].mean()),
            "val_mean_similarity": float(asr["similarities"].mean()),
            "residual_norm": float(np.sqrt(sum(float((r.data.astype(np.float64) ** 2).sum()) for r in res))),
            "seconds": time.perf_counter() - t0,
        }
        result.log.append(row)
        log.info("control epoch %d loss %.5f val_asr %.2f", epoch + 1, row["train_loss"], row["val_asr"])
        if log_path is not None:
            write_log(result.log, log_path)
        if cfg.train.early_stop and asr["asr"] == 1.0:
            result.early_stopped = True
            break
    if path is not None:
        meta = {"epochs": result.epochs, "early_stopped": int(result.early_stopped)}
        save_checkpoint(control_checkpoint(cfg, control, frozen, meta), path)
    return result


def control_lr(cfg: RunConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch: constant, or cosine from train.lr to train.lr_min at the cap."""
    t = cfg.train
    if t.lr_schedule == "constant" or t.epochs == 1:
        return t.lr
    return t.lr_min + 0.5 * (t.lr - t.lr_min) * (1 + math.cos(math.pi * epoch / (t.epochs - 1)))


def write_log(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(CONTROL_LOG_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in CONTROL_LOG_COLUMNS))
    path.write_text("\n".join(lines) + "\n")
