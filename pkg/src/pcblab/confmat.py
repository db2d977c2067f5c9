"""Confusion-matrix statistics: hard/soft accumulation, EMA tracking,
column normalisation, soft targets and the pairwise-bias norm.

Rows index the true class, columns the predicted class. Labels are 0-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HARD, SOFT, EMA = "hard", "soft", "ema"
PCB_COLUMN, ROW_OLS, ONE_HOT = "pcb_column", "row_ols", "one_hot"

DEGENERATE_COLUMN_EPS = 1e-12


@dataclass
class ConfusionMatrix:
    m: np.ndarray
    mode: str = SOFT
    momentum: float = 0.99
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        if self.m.ndim != 2 or self.m.shape[0] != self.m.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {self.m.shape}")
        if self.mode not in (HARD, SOFT, EMA):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.counts is None:
            self.counts = np.zeros(self.num_classes, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.m.shape[0]

    @classmethod
    def identity(cls, num_classes: int, momentum: float = 0.99) -> "ConfusionMatrix":
        """EMA warm start: column-normalised identity gives one-hot targets."""
        return cls(np.eye(num_classes), mode=EMA, momentum=momentum)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.m.copy(), self.mode, self.momentum, self.counts.copy())

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "mode": self.mode,
            "momentum": float(self.momentum),
            "counts": [int(n) for n in self.counts],
            # repr round-trips float64 exactly
            "entries": [float(v) for v in self.m.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        c = int(d["num_classes"])
        m = np.asarray(d["entries"], dtype=np.float64).reshape(c, c)
        return cls(m, mode=d["mode"], momentum=float(d["momentum"]), counts=np.asarray(d["counts"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ConfusionMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return (self.mode == other.mode and self.momentum == other.momentum
                and np.array_equal(self.m, other.m) and np.array_equal(self.counts, other.counts))


@dataclass(frozen=True)
class SoftTarget:
    t: np.ndarray
    source_class: int
    mode: str


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def fg_renormalize(logits, has_background: bool = False) -> np.ndarray:
    """Softmax over the foreground logits, dropping a trailing background logit.

    Accepts a single logit vector or a batch of them (last axis = classes).
    """
    z = np.asarray(logits)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if has_background:
        z = z[..., :-1]
    return softmax(z)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y


def accumulate(preds, labels, mode: str = SOFT, num_classes: int | None = None) -> ConfusionMatrix:
    """Batch confusion matrix.

    ``mode="hard"``: ``preds`` is either an (N,) array of predicted classes or an
    (N, C) array of scores, reduced by argmax (ties go to the lowest index).
    ``mode="soft"``: ``preds`` is (N, C) probabilities; row ``i`` is their mean
    over samples of true class ``i``. Unobserved rows stay zero.
    """
    preds = np.asarray(preds)
    if mode == HARD:
        if preds.ndim == 2:
            num_classes = num_classes or preds.shape[1]
            preds = preds.argmax(axis=1)
        if num_classes is None:
            raise ValueError("num_classes is required for hard mode with index predictions")
        y = _check_labels(labels, num_classes)
        preds = _check_labels(preds, num_classes)
        sums = np.zeros((num_classes, num_classes))
        np.add.at(sums, (y, preds), 1.0)
    elif mode == SOFT:
        num_classes = num_classes or preds.shape[1]
        y = _check_labels(labels, num_classes)
        sums = np.zeros((num_classes, num_classes))
        np.add.at(sums, y, preds)
    else:
        raise ValueError(f"accumulate supports hard/soft, got {mode!r}")
    counts = np.bincount(y, minlength=num_classes)
    m = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return ConfusionMatrix(m, mode=mode, counts=counts)


def ema_update(cm: ConfusionMatrix, batch_probs, batch_labels, tol: float = 1e-6) -> ConfusionMatrix:
    """Blend each observed class's mean batch prediction into its row, in place.

    Rows of classes absent from the batch are left untouched.
    """
    if cm.mode != EMA:
        raise ValueError(f"ema_update needs an EMA matrix, got mode {cm.mode!r}")
    p = np.asarray(batch_probs, dtype=np.float64)
    if np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise ValueError("batch probabilities must sum to 1 per sample")
    y = _check_labels(batch_labels, cm.num_classes)
    sums = np.zeros((cm.num_classes, cm.num_classes))
    np.add.at(sums, y, p)
    n = np.bincount(y, minlength=cm.num_classes)
    present = np.flatnonzero(n)
    g = cm.momentum
    cm.m[present] = g * cm.m[present] + (1.0 - g) * (sums[present] / n[present, None])
    cm.counts += n
    return cm


def column_normalize(m) -> np.ndarray:
    """Scale every column to sum to one; near-empty columns become one-hot on the diagonal."""
    m = np.asarray(m.m if isinstance(m, ConfusionMatrix) else m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("column_normalize needs a non-negative matrix")
    col = m.sum(axis=0)
    ok = col >= DEGENERATE_COLUMN_EPS
    return np.divide(m, col, out=np.eye(m.shape[0]), where=np.broadcast_to(ok, m.shape))


def target_matrix(cm, mode: str = PCB_COLUMN) -> np.ndarray:
    """Row ``y`` holds the soft target for a sample of class ``y``."""
    m = cm.m if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.float64)
    if mode == PCB_COLUMN:
        return column_normalize(m).T
    if mode == ROW_OLS:
        return m.copy()
    if mode == ONE_HOT:
        return np.eye(m.shape[0])
    raise ValueError(f"unknown target mode {mode!r}")


def soft_target(cm, y: int, mode: str = PCB_COLUMN) -> SoftTarget:
    m = cm.m if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.float64)
    if not 0 <= y < m.shape[0]:
        raise ValueError(f"class {y} outside [0, {m.shape[0]})")
    if mode == PCB_COLUMN:
        t = column_normalize(m)[:, y]
    elif mode == ROW_OLS:
        t = m[y].copy()
    elif mode == ONE_HOT:
        t = np.zeros(m.shape[0])
        t[y] = 1.0
    else:
        raise ValueError(f"unknown target mode {mode!r}")
    return SoftTarget(t=t, source_class=int(y), mode=mode)


def pairwise_bias_norm(m) -> float:
    """Frobenius norm of ``M - M.T``."""
    m = np.asarray(m.m if isinstance(m, ConfusionMatrix) else m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return float(np.linalg.norm(m - m.T, ord="fro"))
