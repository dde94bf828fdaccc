"""Procedural shapes corpus and the dirty-label poisoning pipeline."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import EdgeParams, TriggerPatch, composite_trigger, default_target, edge_map, load_png, save_png

DEFAULT_CLASSES = ("circle", "square", "triangle", "cross")
MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "# source_index\tlabel\tpoisoned\timage\tcond"


@dataclass
class DatasetRecord:
    image: np.ndarray
    cond: np.ndarray
    label: int
    poisoned: bool
    source_index: int


@dataclass
class CorpusSplit:
    train: list[DatasetRecord]
    val: list[DatasetRecord]
    test: list[DatasetRecord]

    def splits(self) -> dict[str, list[DatasetRecord]]:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class PoisonSpec:
    fraction: float = 0.05
    patch: TriggerPatch = field(default_factory=TriggerPatch)
    target: np.ndarray = field(default_factory=default_target)
    selection_seed: int = 0
    mode: str = "image"

    def count(self, n: int) -> int:
        return int(math.floor(self.fraction * n + 0.5))


# ----------------------------------------------------------------- rendering
def _shape_mask(cls: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if cls == "circle":
        return dx * dx + dy * dy <= r * r
    if cls == "square":
        half = 0.8 * r
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if cls == "triangle":
        # apex up, base at cy + 0.8r
        top, base = -r, 0.8 * r
        inside_y = (dy >= top) & (dy <= base)
        half_width = (dy - top) / (base - top) * r
        return inside_y & (np.abs(dx) <= half_width)
    if cls == "cross":
        arm = 0.35 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape class {cls!r}")


def render_shape(rng: np.random.Generator, cls: str, size: int) -> np.ndarray:
    """One filled shape on a dark background; all pixels are multiples of 1/255."""
    r = rng.uniform(0.2, 0.35) * size
    margin = r + 1
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    bg = rng.integers(0, int(0.15 * 255) + 1) / 255.0
    fg = rng.integers(int(math.ceil(0.6 * 255)), 256) / 255.0
    img = np.full((size, size), bg)
    img[_shape_mask(cls, size, cx, cy, r)] = fg
    return img


def gen_shapes_corpus(
    n: int = 1000,
    seed: int = 0,
    image_size: int = 32,
    classes: tuple[str, ...] = DEFAULT_CLASSES,
    n_val: int = 50,
    n_test: int = 100,
    edge: EdgeParams = EdgeParams(),
) -> CorpusSplit:
    if n < len(classes):
        raise ValueError(f"need at least one record per class: n={n} < {len(classes)} classes")
    if image_size < 8:
        raise ValueError(f"image_size {image_size} too small to render shapes (min 8)")
    records = []
    for idx in range(n + n_val + n_test):
        rng = np.random.default_rng([seed, idx])
        label = int(rng.integers(len(classes)))
        img = render_shape(rng, classes[label], image_size)
        records.append(DatasetRecord(img, edge_map(img, edge), label, False, idx))
    return CorpusSplit(records[:n], records[n:n + n_val], records[n + n_val:])


# ----------------------------------------------------------------- poisoning
def trigger_condition(x: np.ndarray, patch: TriggerPatch, edge: EdgeParams, mode: str = "image") -> np.ndarray:
    """Conditioning map of a triggered image.

    ``image`` blends the glyph into the image before edge extraction;
    ``cond`` blends it directly into the clean edge map.
    """
    if mode == "image":
        return edge_map(composite_trigger(x, patch), edge)
    if mode == "cond":
        return composite_trigger(edge_map(x, edge), patch)
    raise ValueError(f"unknown trigger mode {mode!r} (expected 'image' or 'cond')")


def select_poison_indices(n: int, spec: PoisonSpec) -> np.ndarray:
    if not 0.0 <= spec.fraction < 1.0:
        raise ValueError(f"poison fraction must be in [0, 1), got {spec.fraction}")
    m = spec.count(n)
    if spec.fraction > 0 and m < 1:
        raise ValueError(f"poison fraction {spec.fraction} selects no record out of {n}")
    rng = np.random.default_rng(spec.selection_seed)
    return np.sort(rng.choice(n, size=m, replace=False))


def build_poisoned_corpus(clean: CorpusSplit, spec: PoisonSpec, edge: EdgeParams = EdgeParams()) -> CorpusSplit:
    chosen = set(select_poison_indices(len(clean.train), spec).tolist())
    train = []
    for i, rec in enumerate(clean.train):
        if i in chosen:
            cond = trigger_condition(rec.image, spec.patch, edge, spec.mode)
            rec = DatasetRecord(spec.target.copy(), cond, rec.label, True, rec.source_index)
        train.append(rec)
    return CorpusSplit(train, list(clean.val), list(clean.test))


def make_triggered_eval_conditions(
    records: list[DatasetRecord], patch: TriggerPatch, edge: EdgeParams = EdgeParams(), mode: str = "image"
) -> list[DatasetRecord]:
    return [
        dataclasses.replace(rec, cond=trigger_condition(rec.image, patch, edge, mode))
        for rec in records
    ]


# ---------------------------------------------------------------- persistence
def save_records(records: list[DatasetRecord], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for rec in records:
        img_name = f"img_{rec.source_index:06d}.png"
        cond_name = f"cond_{rec.source_index:06d}.png"
        save_png(rec.image, directory / img_name)
        save_png(rec.cond, directory / cond_name)
        lines.append(f"{rec.source_index}\t{rec.label}\t{int(rec.poisoned)}\t{img_name}\t{cond_name}")
    path = directory / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def load_records(directory) -> list[DatasetRecord]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise ValueError(f"{path}: manifest not found")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        idx, label, poisoned, img_name, cond_name = parts
        records.append(DatasetRecord(
            load_png(directory / img_name), load_png(directory / cond_name),
            int(label), poisoned == "1", int(idx),
        ))
    return records


def save_corpus(corpus: CorpusSplit, directory) -> None:
    for name, recs in corpus.splits().items():
        save_records(recs, Path(directory) / name)


def load_corpus(directory) -> CorpusSplit:
    return CorpusSplit(*(load_records(Path(directory) / name) for name in ("train", "val", "test")))
