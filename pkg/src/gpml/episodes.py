"""Episodic N-way K-shot sampling over synthetic clusters or PNG image folders."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Task:
    """What an adaptation routine is allowed to see: labeled support, unlabeled query."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    n_way: int


@dataclass(frozen=True)
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    classes: tuple = ()

    def task(self) -> Task:
        """Drop the query labels."""
        return Task(self.support_x, self.support_y, self.query_x, self.n_way)

    def without_labels(self) -> "Episode":
        return Episode(self.support_x, self.support_y, self.query_x,
                       np.zeros_like(self.query_y), self.n_way, self.classes)


@dataclass
class DataSource:
    """A class inventory for one split.

    ``fetch(cls, idx)`` returns items of class ``cls`` as one stacked array.
    """

    classes: list
    counts: dict
    fetch: Callable[[object, np.ndarray], np.ndarray]
    split: str = "train"
    item_shape: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.classes)


@dataclass
class Splits:
    train: DataSource
    val: DataSource
    test: DataSource
    centers: np.ndarray | None = None

    def __getitem__(self, split: str) -> DataSource:
        return {"train": self.train, "val": self.val, "test": self.test}[split]


def array_source(data: dict, split: str = "train") -> DataSource:
    """DataSource over in-memory arrays, ``data[cls]`` of shape (items, ...)."""
    classes = list(data)
    shape = data[classes[0]].shape[1:] if classes else ()
    return DataSource(classes=classes, counts={c: len(data[c]) for c in classes},
                      fetch=lambda c, idx: data[c][idx], split=split, item_shape=shape)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_episode(source: DataSource, n: int, k: int, q: int | Sequence[int], seed=None) -> Episode:
    """Draw an ``n``-way ``k``-shot episode with ``q`` queries per class.

    ``q`` may also be a per-class sequence of query counts (for deliberately
    imbalanced query sets). Labels are remapped to 0..n-1 in draw order.
    """
    rng = _rng(seed)
    q_counts = [q] * n if np.isscalar(q) else list(q)
    if len(q_counts) != n:
        raise ValueError(f"need {n} query counts, got {len(q_counts)}")
    if len(source.classes) < n:
        raise DatasetError(f"{source.split} split has {len(source.classes)} classes, need {n}")
    need = k + max(q_counts)
    eligible = [c for c in source.classes if source.counts[c] >= need]
    if len(eligible) < n:
        short = [c for c in source.classes if source.counts[c] < need]
        raise DatasetError(f"only {len(eligible)} classes have >= {need} items, need {n}; "
                           f"short: {short[:5]}")
    picked = rng.choice(len(eligible), size=n, replace=False)
    chosen = [eligible[i] for i in picked]
    sx, sy, qx, qy = [], [], [], []
    for label, (c, qc) in enumerate(zip(chosen, q_counts)):
        idx = rng.choice(source.counts[c], size=k + qc, replace=False)
        items = source.fetch(c, idx)
        sx.append(items[:k])
        qx.append(items[k:])
        sy += [label] * k
        qy += [label] * qc
    return Episode(np.concatenate(sx).astype(np.float64), np.array(sy, dtype=np.int64),
                   np.concatenate(qx).astype(np.float64), np.array(qy, dtype=np.int64),
                   n, tuple(chosen))


def split_classes(n_classes: int) -> dict[str, range]:
    n_train = round(0.6 * n_classes)
    n_val = round(0.2 * n_classes)
    return {"train": range(0, n_train), "val": range(n_train, n_train + n_val),
            "test": range(n_train + n_val, n_classes)}


def make_synthetic_source(dim: int = 20, n_classes: int = 50, items_per_class: int = 40,
                          spread: float = 0.5, seed: int = 0) -> Splits:
    """Gaussian clusters: centers ~ 3*N(0, I), items = center + spread*N(0, I).

    Classes are split 60/20/20 into train/val/test.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    if n_classes < 5:
        raise DatasetError("need at least 5 classes")
    rng = np.random.default_rng(seed)
    centers = 3.0 * rng.standard_normal((n_classes, dim))
    items = centers[:, None, :] + spread * rng.standard_normal((n_classes, items_per_class, dim))
    parts = {split: array_source({c: items[c] for c in cls}, split)
             for split, cls in split_classes(n_classes).items()}
    return Splits(**parts, centers=centers)


def read_manifest(path: str | Path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["class", "split"]:
            raise DatasetError(f"{path}: header must be 'class,split'")
        mapping = {}
        for row in reader:
            name, split = row["class"].strip(), row["split"].strip()
            if split not in SPLITS:
                raise DatasetError(f"{path}: class {name!r} has unknown split {split!r}")
            if name in mapping:
                raise DatasetError(f"{path}: class {name!r} listed twice")
            mapping[name] = split
    return mapping


def _load_png(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise DatasetError(f"{path}: not a PNG image")
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"{path}: cannot decode image ({exc})") from exc
    return arr.transpose(2, 0, 1)


class _ImageFolder:
    def __init__(self, root: Path, files: dict[str, list[Path]]):
        self.root = root
        self.files = files
        self.shape: tuple[int, ...] | None = None

    def fetch(self, cls: str, idx: np.ndarray) -> np.ndarray:
        out = []
        for i in idx:
            arr = _load_png(self.files[cls][int(i)])
            if self.shape is None:
                self.shape = arr.shape
            elif arr.shape != self.shape:
                raise DatasetError(f"{self.files[cls][int(i)]}: image shape {arr.shape} "
                                   f"differs from {self.shape}")
            out.append(arr)
        return np.stack(out)


def load_image_source(root: str | Path, manifest: str | Path) -> Splits:
    """Lazy PNG DataSources laid out as ``root/<class>/<item>.png``."""
    root = Path(root)
    mapping = read_manifest(manifest)
    files: dict[str, list[Path]] = {}
    for name in mapping:
        d = root / name
        if not d.is_dir():
            raise DatasetError(f"class directory missing: {name!r}")
        pngs = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
        if not pngs:
            raise DatasetError(f"class {name!r} has no PNG images")
        files[name] = pngs
    folder = _ImageFolder(root, files)
    parts = {}
    for split in SPLITS:
        classes = [c for c, s in mapping.items() if s == split]
        parts[split] = DataSource(classes=classes, counts={c: len(files[c]) for c in classes},
                                  fetch=folder.fetch, split=split)
    return Splits(**parts)
