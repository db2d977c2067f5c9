"""Post-hoc calibration from confusion-matrix or mean-score statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .confmat import ConfusionMatrix, column_normalize

CM = "cm"
MS_ORIGINAL = "ms_original"
MS_MODIFIED = "ms_modified"
KINDS = (CM, MS_ORIGINAL, MS_MODIFIED)

ORIGINAL, MODIFIED = "original", "modified"


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationTransform:
    kind: str
    m_hat: np.ndarray | None = None
    s: np.ndarray | None = None
    suppress_threshold: float = 1e-3
    has_background: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CalibrationError(f"unknown calibration kind {self.kind!r}")
        if self.kind == CM:
            if self.m_hat is None or self.s is not None:
                raise CalibrationError("cm transform needs m_hat and no s")
            if not np.allclose(self.m_hat.sum(axis=0), 1.0, rtol=0, atol=1e-9):
                raise CalibrationError("m_hat columns must sum to 1")
        else:
            if self.s is None or self.m_hat is not None:
                raise CalibrationError("mean-score transform needs s and no m_hat")
            if np.any(self.s < 0):
                raise CalibrationError("mean scores must be non-negative")

    @property
    def num_classes(self) -> int:
        return len(self.s) if self.m_hat is None else self.m_hat.shape[0]

    @classmethod
    def from_confusion(cls, cm, has_background: bool = False) -> "CalibrationTransform":
        return cls(CM, m_hat=column_normalize(cm), has_background=has_background)

    @classmethod
    def from_mean_scores(cls, cm, variant: str = MODIFIED, suppress_threshold: float = 1e-3,
                         has_background: bool = False) -> "CalibrationTransform":
        kind = MS_MODIFIED if variant == MODIFIED else MS_ORIGINAL
        return cls(kind, s=mean_scores(cm, variant), suppress_threshold=suppress_threshold,
                   has_background=has_background)

    @classmethod
    def identity(cls, num_classes: int, has_background: bool = False) -> "CalibrationTransform":
        return cls(CM, m_hat=np.eye(num_classes), has_background=has_background)

    def to_dict(self) -> dict:
        c = self.num_classes
        d = {"kind": self.kind, "num_classes": c, "suppress_threshold": self.suppress_threshold,
             "has_background": self.has_background}
        if self.m_hat is not None:
            d["entries"] = [float(v) for v in self.m_hat.ravel()]
        else:
            d["scores"] = [float(v) for v in self.s]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationTransform":
        c = int(d["num_classes"])
        m_hat = np.asarray(d["entries"]).reshape(c, c) if "entries" in d else None
        s = np.asarray(d["scores"], dtype=np.float64) if "scores" in d else None
        return cls(d["kind"], m_hat=m_hat, s=s, suppress_threshold=float(d["suppress_threshold"]),
                   has_background=bool(d["has_background"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "CalibrationTransform":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __call__(self, probs):
        if self.kind == CM:
            return cm_calibrate(probs, self)
        return ms_calibrate(probs, self)


def mean_scores(cm, variant: str = ORIGINAL) -> np.ndarray:
    """Diagonal of the matrix (original) or its column sums (modified)."""
    m = cm.m if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.float64)
    if variant == ORIGINAL:
        return np.diag(m).copy()
    if variant == MODIFIED:
        return m.sum(axis=0)
    raise CalibrationError(f"unknown mean-score variant {variant!r}")


def _split(probs, transform):
    p = np.asarray(probs, dtype=np.float64)
    c = transform.num_classes
    expected = c + 1 if transform.has_background else c
    if p.shape[-1] != expected:
        raise CalibrationError(f"expected {expected} probabilities per sample, got {p.shape[-1]}")
    if np.any(p < 0):
        raise CalibrationError("probabilities must be non-negative")
    if transform.has_background:
        return p[..., :c], p[..., c:]
    return p, None


def _rescale_background(fg, bg):
    # foreground to unit mass first, then shrink to leave the background untouched
    fg = fg / fg.sum(axis=-1, keepdims=True)
    return np.concatenate([fg * (1.0 - bg), bg], axis=-1)


def cm_calibrate(probs, transform: CalibrationTransform) -> np.ndarray:
    """``p~_i = sum_j M^_ij p^_j`` over the foreground, single sample or batch."""
    if transform.kind != CM:
        raise CalibrationError(f"cm_calibrate needs a cm transform, got {transform.kind!r}")
    fg, bg = _split(probs, transform)
    out = fg @ transform.m_hat.T
    if bg is not None:
        return _rescale_background(out, bg)
    return out


def ms_calibrate(probs, transform: CalibrationTransform) -> np.ndarray:
    """Divide by per-class mean score and renormalise.

    The modified variant first zeroes classes whose score is below the
    suppression threshold.
    """
    if transform.kind not in (MS_ORIGINAL, MS_MODIFIED):
        raise CalibrationError(f"ms_calibrate needs a mean-score transform, got {transform.kind!r}")
    fg, bg = _split(probs, transform)
    s = transform.s
    q = fg / np.maximum(s, np.finfo(np.float64).tiny)
    if transform.kind == MS_MODIFIED:
        q = np.where(s < transform.suppress_threshold, 0.0, q)
    total = q.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise CalibrationError("every class was suppressed for at least one sample")
    q = q / total
    if bg is not None:
        return _rescale_background(q, bg)
    return q
