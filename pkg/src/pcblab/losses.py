"""Classification losses with closed-form gradients w.r.t. the logits.

Every function takes a single logit vector (K,) or a batch (N, K) and returns a
:class:`LossValue` holding per-sample values and ``dloss/dlogits`` of the same
shape as the input. ``K = C + 1`` when a trailing background logit is present;
the background label is then ``C``.

Regularised variants are evaluated as ``base + alpha * (pcb - base)``. That is
algebraically the usual convex mix, and it keeps the degenerate cases exact:
whenever the soft target collapses to the one-hot label the PCB term reproduces
the base term bit for bit and the mix returns the base loss unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .confmat import PCB_COLUMN, ConfusionMatrix, SoftTarget, column_normalize, target_matrix

CE, PCB_CE, BCE_PCB, SEESAW_PCB, BSCE, LABEL_SMOOTH = (
    "ce", "pcb_ce", "bce_pcb", "seesaw_pcb", "bsce", "label_smooth")
VARIANTS = (CE, PCB_CE, BCE_PCB, SEESAW_PCB, BSCE, LABEL_SMOOTH)


@dataclass
class LossConfig:
    variant: str = PCB_CE
    alpha: float = 0.4
    smoothing: float = 0.0
    class_weights: np.ndarray | None = None
    seesaw_S: np.ndarray | None = None
    class_priors: np.ndarray | None = None
    target_mode: str = PCB_COLUMN
    has_background: bool = False
    # BCE form uses the raw matrix column by default; True switches to the normalised one
    bce_normalize: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        for name in ("class_weights", "seesaw_S", "class_priors"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if np.any(v <= 0):
                    raise ValueError(f"{name} entries must be positive")
                setattr(self, name, v)
        if self.seesaw_S is not None and not np.all(np.diag(self.seesaw_S) == 1.0):
            raise ValueError("seesaw_S must have a unit diagonal")

    @property
    def uses_pcb(self) -> bool:
        return self.variant in (PCB_CE, BCE_PCB, SEESAW_PCB)


@dataclass
class LossValue:
    value: np.ndarray | float
    dlogits: np.ndarray = field(repr=False)


def _batch(logits, y):
    z = np.asarray(logits)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise ValueError(f"{z.shape[0]} logit rows but {y.shape[0]} labels")
    return z, y, single


def _out(value, grad, single) -> LossValue:
    if single:
        return LossValue(float(value[0]), grad[0])
    return LossValue(value, grad)


def _check_range(y, upper):
    if y.size and (y.min() < 0 or y.max() >= upper):
        raise ValueError(f"labels must lie in [0, {upper}), got range [{y.min()}, {y.max()}]")


def _xlogy_sum(t, logp):
    # zero-weight terms contribute exactly zero even where logp is -inf
    return np.where(t > 0, t * logp, 0.0).sum(axis=1)


def _soft_ce(z, t, excess=None):
    """Soft-target cross-entropy under ``p_i = e^{z_i} / (sum_j e^{z_j} + sum_j X_ij e^{z_j})``.

    ``excess`` is ``X = S - 1`` for the Seesaw denominator; ``None`` is plain
    softmax. Writing the denominator as a correction to the softmax sum makes
    ``S = 1`` reproduce softmax bit for bit.
    """
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    if excess is not None:
        denom = denom + e @ excess.T
    value = -_xlogy_sum(t, shifted - np.log(denom))
    r = t / denom
    back = r.sum(axis=1, keepdims=True)
    if excess is not None:
        back = back + r @ excess
    return value, e * back - t


def soft_cross_entropy(z: np.ndarray, t: np.ndarray):
    """``-sum_i t_i log softmax(z)_i`` and its gradient, row-wise."""
    return _soft_ce(z, t)


def _one_hot(y, k, dtype=np.float64):
    t = np.zeros((y.size, k), dtype=dtype)
    valid = y < k
    t[np.flatnonzero(valid), y[valid]] = 1.0
    return t


def ce(logits, y, has_background: bool = False) -> LossValue:
    z, y, single = _batch(logits, y)
    _check_range(y, z.shape[1])
    value, grad = soft_cross_entropy(z, _one_hot(y, z.shape[1], z.dtype))
    return _out(value, grad, single)


def _as_targets(target, n):
    if isinstance(target, SoftTarget):
        target = target.t
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = np.broadcast_to(t, (n, t.size))
    return t


def pcb_ce(logits, target, has_background: bool = False) -> LossValue:
    """Cross-entropy of the foreground-renormalised probabilities against fixed soft targets."""
    z = np.asarray(logits)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    t = _as_targets(target, z.shape[0])
    c = z.shape[1] - 1 if has_background else z.shape[1]
    if t.shape[1] != c:
        raise ValueError(f"target length {t.shape[1]} does not match {c} foreground classes")
    value, gfg = soft_cross_entropy(z[:, :c], t)
    grad = np.zeros_like(z)
    grad[:, :c] = gfg
    return _out(value, grad, single)


def _mix(base_v, base_g, reg_v, reg_g, alpha, fg):
    value = np.where(fg, base_v + alpha * (reg_v - base_v), base_v)
    grad = np.where(fg[:, None], base_g + alpha * (reg_g - base_g), base_g)
    return value, grad


def _fg_targets(cm, y, c, mode):
    table = target_matrix(cm, mode)
    if table.shape[0] != c:
        raise ValueError(f"confusion matrix has {table.shape[0]} classes, logits imply {c}")
    fg = y < c
    return table[np.where(fg, y, 0)], fg


def combined_cls(logits, y, cm, config: LossConfig, alpha: float) -> LossValue:
    """``alpha * L_PCB + (1 - alpha) * L_CE`` on foreground samples, plain CE on background."""
    z, y, single = _batch(logits, y)
    _check_range(y, z.shape[1])
    c = z.shape[1] - 1 if config.has_background else z.shape[1]
    base_v, base_g = soft_cross_entropy(z, _one_hot(y, z.shape[1], z.dtype))
    t, fg = _fg_targets(cm, y, c, config.target_mode)
    reg_v, reg_fg = soft_cross_entropy(z[:, :c], t)
    reg_g = np.zeros_like(base_g)
    reg_g[:, :c] = reg_fg
    return _out(*_mix(base_v, base_g, reg_v, reg_g, alpha, fg), single)


def _weighted_bce(z, t, w):
    value = (w * (np.logaddexp(0.0, z) - t * z)).sum(axis=1)
    sig = np.exp(-np.logaddexp(0.0, -z))
    return value, w * (sig - t)


def bce_pcb(logits, y, cm, config: LossConfig, alpha: float) -> LossValue:
    """Per-class sigmoid BCE; the PCB term swaps one-hot targets for column ``y`` of the matrix.

    Logits are foreground only (C wide); label ``C`` marks a background sample
    whose targets are all zero and which receives the base term only.
    """
    z, y, single = _batch(logits, y)
    c = z.shape[1]
    _check_range(y, c + 1)
    w = np.ones(c) if config.class_weights is None else config.class_weights
    m = cm.m if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.float64)
    if m.shape[0] != c:
        raise ValueError(f"confusion matrix has {m.shape[0]} classes, logits imply {c}")
    columns = column_normalize(m) if config.bce_normalize else m
    fg = y < c
    base_v, base_g = _weighted_bce(z, _one_hot(y, c, z.dtype), w)
    reg_v, reg_g = _weighted_bce(z, columns.T[np.where(fg, y, 0)], w)
    return _out(*_mix(base_v, base_g, reg_v, reg_g, alpha, fg), single)


def _seesaw_soft(z, t, s):
    """Soft-target loss under ``p_i = e^{z_i} / (sum_{j != i} S_ij e^{z_j} + e^{z_i})``."""
    return _soft_ce(z, t, s - 1.0)


def seesaw_matrix(config: LossConfig, c: int) -> np.ndarray:
    s = np.ones((c, c)) if config.seesaw_S is None else np.array(config.seesaw_S, dtype=np.float64)
    if s.shape != (c, c):
        raise ValueError(f"seesaw_S must be {c}x{c}, got {s.shape}")
    if np.any(s <= 0):
        raise ValueError("seesaw_S entries must be positive")
    np.fill_diagonal(s, 1.0)
    return s


def seesaw_pcb(logits, y, cm, config: LossConfig, alpha: float) -> LossValue:
    """Seesaw-denominator probabilities for both the base and the PCB term.

    With a background logit, ``S`` is padded with ones for it so the base term
    spans all ``C + 1`` logits; the PCB term stays on the foreground.
    """
    z, y, single = _batch(logits, y)
    k = z.shape[1]
    _check_range(y, k)
    c = k - 1 if config.has_background else k
    s_fg = seesaw_matrix(config, c)
    s_full = s_fg
    if config.has_background:
        s_full = np.ones((k, k))
        s_full[:c, :c] = s_fg
    base_v, base_g = _seesaw_soft(z, _one_hot(y, k, z.dtype), s_full)
    t, fg = _fg_targets(cm, y, c, config.target_mode)
    reg_v, reg_fg = _seesaw_soft(z[:, :c], t, s_fg)
    reg_g = np.zeros_like(base_g)
    reg_g[:, :c] = reg_fg
    return _out(*_mix(base_v, base_g, reg_v, reg_g, alpha, fg), single)


def bsce(logits, y, config: LossConfig) -> LossValue:
    """Balanced softmax: CE on foreground logits shifted by log class priors."""
    if config.class_priors is None:
        raise ValueError("bsce needs class_priors")
    z, y, single = _batch(logits, y)
    n = config.class_priors
    c = n.size
    if z.shape[1] != (c + 1 if config.has_background else c):
        raise ValueError(f"{n.size} priors do not match {z.shape[1]} logits")
    _check_range(y, z.shape[1])
    shifted = z.copy()
    # log(n / max n) shifts by the same amount as log n up to a constant
    shifted[:, :c] += np.log(n / n.max())
    value, grad = soft_cross_entropy(shifted, _one_hot(y, z.shape[1], z.dtype))
    return _out(value, grad, single)


def label_smooth(logits, y, smoothing: float) -> LossValue:
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    z, y, single = _batch(logits, y)
    k = z.shape[1]
    _check_range(y, k)
    t = (1.0 - smoothing) * _one_hot(y, k, z.dtype) + smoothing / k
    value, grad = soft_cross_entropy(z, t)
    return _out(value, grad, single)


def classification_loss(logits, y, cm, config: LossConfig, alpha: float) -> LossValue:
    """Dispatch on ``config.variant``; ``alpha`` is the effective (scheduled) weight."""
    v = config.variant
    if v == CE:
        return ce(logits, y, config.has_background)
    if v == PCB_CE:
        return combined_cls(logits, y, cm, config, alpha)
    if v == BCE_PCB:
        return bce_pcb(logits, y, cm, config, alpha)
    if v == SEESAW_PCB:
        return seesaw_pcb(logits, y, cm, config, alpha)
    if v == BSCE:
        return bsce(logits, y, config)
    return label_smooth(logits, y, config.smoothing)
