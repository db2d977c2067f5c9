"""Synthetic long-tailed datasets and delimited-text ingestion.

Labels are 0-based internally (``0 .. C-1``). Files on disk use the 1-based
convention ``1 .. C``; :func:`ingest_tabular` converts on the way in.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN = "train"
VAL = "val"

RARE = "rare"
COMMON = "common"
FREQUENT = "frequent"
SPLITS = (FREQUENT, COMMON, RARE)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SplitThresholds:
    """Inclusive upper bounds on train counts for the rare and common splits."""

    rare_max: int = 10
    common_max: int = 100

    def __post_init__(self):
        if not 1 <= self.rare_max < self.common_max:
            raise DatasetError(f"need 1 <= rare_max < common_max, got {self}")


def assign_splits(class_counts, thresholds: SplitThresholds = SplitThresholds()) -> tuple[str, ...]:
    """Map each class to frequent/common/rare from its train count.

    A class with no train samples is labelled rare.
    """
    out = []
    for n in class_counts:
        if n <= thresholds.rare_max:
            out.append(RARE)
        elif n <= thresholds.common_max:
            out.append(COMMON)
        else:
            out.append(FREQUENT)
    return tuple(out)


@dataclass
class LongTailDataset:
    features: np.ndarray
    labels: np.ndarray
    partition: np.ndarray
    class_counts: np.ndarray
    split_of: tuple[str, ...]
    seed: int
    thresholds: SplitThresholds = field(default_factory=SplitThresholds)
    source: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        if part not in (TRAIN, VAL):
            raise DatasetError(f"unknown partition {part!r}")
        mask = self.partition == part
        return self.features[mask], self.labels[mask]

    def train(self):
        return self.subset(TRAIN)

    def val(self):
        return self.subset(VAL)

    def split_members(self, split: str) -> np.ndarray:
        return np.array([c for c, s in enumerate(self.split_of) if s == split], dtype=np.int64)

    def astype(self, dtype) -> "LongTailDataset":
        return LongTailDataset(
            features=self.features.astype(dtype),
            labels=self.labels,
            partition=self.partition,
            class_counts=self.class_counts,
            split_of=self.split_of,
            seed=self.seed,
            thresholds=self.thresholds,
            source=dict(self.source),
        )

    def summary(self) -> dict:
        _, yv = self.val()
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "seed": int(self.seed),
            "num_train": int((self.partition == TRAIN).sum()),
            "num_val": int((self.partition == VAL).sum()),
            "class_counts": [int(n) for n in self.class_counts],
            "val_counts": [int(n) for n in np.bincount(yv, minlength=self.num_classes)],
            "split_of": list(self.split_of),
            "thresholds": {"rare_max": self.thresholds.rare_max, "common_max": self.thresholds.common_max},
            "source": self.source,
        }

    def save(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.json`` (summary) and ``<stem>.npz`` (arrays)."""
        stem = Path(stem)
        js, npz = stem.with_suffix(".json"), stem.with_suffix(".npz")
        js.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        with open(npz, "wb") as fh:
            np.savez(fh, features=self.features, labels=self.labels,
                     partition=self.partition.astype("U5"))
        return js, npz

    @classmethod
    def load(cls, stem) -> "LongTailDataset":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        with np.load(stem.with_suffix(".npz")) as z:
            features, labels, partition = z["features"], z["labels"], z["partition"]
        th = SplitThresholds(**meta["thresholds"])
        return cls(features=features, labels=labels.astype(np.int64), partition=partition.astype(object),
                   class_counts=np.asarray(meta["class_counts"], dtype=np.int64),
                   split_of=tuple(meta["split_of"]), seed=meta["seed"], thresholds=th,
                   source=meta.get("source", {}))


def train_counts(num_classes: int, max_count: int, imbalance_ratio: float) -> np.ndarray:
    """Exponential profile ``round(n_max * rho ** (-(c-1)/(C-1)))``, at least 1."""
    if num_classes < 2:
        raise DatasetError(f"num_classes must be >= 2, got {num_classes}")
    if imbalance_ratio < 1:
        raise DatasetError(f"imbalance_ratio must be >= 1, got {imbalance_ratio}")
    if max_count < 1:
        raise DatasetError(f"max_count must be >= 1, got {max_count}")
    c = np.arange(num_classes)
    raw = max_count * float(imbalance_ratio) ** (-c / (num_classes - 1))
    # round half up, not to even
    return np.maximum(np.floor(raw + 0.5).astype(np.int64), 1)


ORDERED, PAIRED, SHUFFLED = "ordered", "paired", "shuffled"
LAYOUTS = (ORDERED, PAIRED, SHUFFLED)


def paired_slots(num_classes: int) -> np.ndarray:
    """Angular slot per class for the head/tail zig-zag ``h0 t0 t1 h1 h2 t2 t3 h3 ...``.

    Heads are the first half of the classes (largest counts), tails the second
    half in reverse; every tail class then borders exactly one head class.
    """
    half = (num_classes + 1) // 2
    heads = list(range(half))
    tails = list(range(num_classes - 1, half - 1, -1))
    order = []
    for k in range(half):
        pair = [heads[k]] + ([tails[k]] if k < len(tails) else [])
        order.extend(pair if k % 2 == 0 else pair[::-1])
    slots = np.empty(num_classes, dtype=np.int64)
    slots[order] = np.arange(num_classes)
    return slots


def class_means(num_classes: int, feature_dim: int, rng: np.random.Generator,
                layout: str = ORDERED) -> np.ndarray:
    """Unit vectors evenly rotated in the first two coordinates.

    ``ordered`` puts class ``c`` at angle ``2 pi c / C``, so neighbours have
    similar counts except across the wrap-around between the last and first
    class. ``paired`` gives every tail class one head neighbour (see
    :func:`paired_slots`). ``shuffled`` assigns slots by a seeded permutation.
    """
    if layout == ORDERED:
        slots = np.arange(num_classes)
    elif layout == PAIRED:
        slots = paired_slots(num_classes)
    elif layout == SHUFFLED:
        slots = rng.permutation(num_classes)
    else:
        raise DatasetError(f"unknown layout {layout!r}")
    theta = 2.0 * np.pi * slots / num_classes
    means = np.zeros((num_classes, feature_dim))
    means[:, 0] = np.cos(theta)
    means[:, 1] = np.sin(theta)
    return means


def synth(
    num_classes: int = 30,
    max_count: int = 1000,
    imbalance_ratio: float = 100.0,
    feature_dim: int = 16,
    confusability: float = 0.1,
    seed: int = 0,
    val_per_class: int = 50,
    thresholds: SplitThresholds = SplitThresholds(),
    layout: str = ORDERED,
) -> LongTailDataset:
    if feature_dim < 2:
        raise DatasetError(f"feature_dim must be >= 2, got {feature_dim}")
    if not confusability > 0:
        raise DatasetError(f"confusability must be > 0, got {confusability}")
    if val_per_class < 1:
        raise DatasetError(f"val_per_class must be >= 1, got {val_per_class}")
    counts = train_counts(num_classes, max_count, imbalance_ratio)
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, feature_dim, rng, layout)

    labels = np.concatenate([
        np.repeat(np.arange(num_classes), counts),
        np.repeat(np.arange(num_classes), val_per_class),
    ])
    partition = np.array([TRAIN] * int(counts.sum()) + [VAL] * (num_classes * val_per_class), dtype=object)
    noise = rng.standard_normal((labels.size, feature_dim))
    features = means[labels] + confusability * noise

    return LongTailDataset(
        features=features,
        labels=labels.astype(np.int64),
        partition=partition,
        class_counts=counts,
        split_of=assign_splits(counts, thresholds),
        seed=int(seed),
        thresholds=thresholds,
        source={
            "kind": "synth",
            "num_classes": num_classes,
            "max_count": max_count,
            "imbalance_ratio": float(imbalance_ratio),
            "feature_dim": feature_dim,
            "confusability": float(confusability),
            "val_per_class": val_per_class,
            "layout": layout,
        },
    )


@dataclass(frozen=True)
class TabularSchema:
    label_column: str = "label"
    num_classes: int | None = None
    delimiter: str = ","


def _hash_key(seed: int, row: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{row}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def ingest_tabular(
    path,
    schema: TabularSchema = TabularSchema(),
    seed: int = 0,
    val_per_class: int = 0,
    thresholds: SplitThresholds = SplitThresholds(),
) -> LongTailDataset:
    """Read a delimited file with a header row and the label column last.

    Labels in the file are 1-based. Up to ``val_per_class`` samples of every
    class go to validation, chosen by a seeded hash of the row index; at
    least one sample per class always stays in train.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=schema.delimiter))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    if header[-1] != schema.label_column:
        raise DatasetError(f"{path}: last column must be {schema.label_column!r}, got {header[-1]!r}")
    if not body:
        raise DatasetError(f"{path}: no data rows")
    width = len(header)
    feats, labels = [], []
    for i, row in enumerate(body, start=1):
        if len(row) != width:
            raise DatasetError(f"{path}: row {i} has {len(row)} fields, expected {width}")
        try:
            feats.append([float(cell) for cell in row[:-1]])
        except ValueError as exc:
            raise DatasetError(f"{path}: row {i}: non-numeric feature ({exc})") from None
        try:
            label = int(row[-1])
        except ValueError:
            raise DatasetError(f"{path}: row {i}: label {row[-1]!r} is not an integer") from None
        labels.append(label)
    y = np.asarray(labels, dtype=np.int64)
    x = np.asarray(feats, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0]) + 1
        raise DatasetError(f"{path}: row {bad}: non-finite feature")
    num_classes = schema.num_classes or int(y.max())
    out_of_range = (y < 1) | (y > num_classes)
    if out_of_range.any():
        bad = int(np.flatnonzero(out_of_range)[0])
        raise DatasetError(f"{path}: row {bad + 1}: label {y[bad]} outside [1..{num_classes}]")
    y = y - 1

    partition = np.full(y.size, TRAIN, dtype=object)
    if val_per_class > 0:
        for c in range(num_classes):
            rows_c = np.flatnonzero(y == c)
            take = min(val_per_class, rows_c.size - 1)
            if take <= 0:
                continue
            order = sorted(rows_c, key=lambda r: _hash_key(seed, int(r)))
            partition[order[:take]] = VAL
    counts = np.bincount(y[partition == TRAIN], minlength=num_classes)
    return LongTailDataset(
        features=x,
        labels=y,
        partition=partition,
        class_counts=counts.astype(np.int64),
        split_of=assign_splits(counts, thresholds),
        seed=int(seed),
        thresholds=thresholds,
        source={"kind": "tabular", "path": str(path), "val_per_class": val_per_class},
    )
