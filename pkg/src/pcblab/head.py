"""Recurrent prediction head with exact backpropagation.

Shapes (batch of N samples)::

    X1   = relu(x W1 + b1) W2 + b2                    backbone, (N, D)
    z_r  = X_r Wc + bc                                 shared classifier, (N, K)
    u_r  = LayerNorm(z_r)  (optional, else u_r = z_r)
    f_r  = relu(u_r Wp1 + bp1) Wp2 + bp2               logit projection, (N, D)
    X_r+1 = X_r + f_r

``Wp2``/``bp2`` start at zero, so refinement is inert at initialisation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .confmat import softmax
from .losses import BCE_PCB, LossConfig, classification_loss

BACKBONE_PARAMS = ("W1", "b1", "W2", "b2")
CLASSIFIER_PARAMS = ("Wc", "bc")
PROJECTION_PARAMS = ("Wp1", "bp1", "Wp2", "bp2")
NORM_PARAMS = ("ln_g", "ln_b")
LN_EPS = 1e-5


def default_step_weights(steps: int) -> tuple[float, ...]:
    """0.6 on the last step, the remaining 0.4 shared equally by the earlier ones."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps == 1:
        return (1.0,)
    early = 0.4 / (steps - 1)
    return (early,) * (steps - 1) + (0.6,)


def alpha_schedule(r: int, steps: int, alpha: float) -> float:
    """Linear ramp ``(r-1)/(R-1) * alpha`` for 1-based step ``r``; full alpha when R == 1."""
    if not 1 <= r <= steps:
        raise ValueError(f"step {r} outside [1, {steps}]")
    if steps == 1:
        return alpha
    return (r - 1) / (steps - 1) * alpha


@dataclass
class HeadConfig:
    input_dim: int
    num_outputs: int
    backbone_hidden: int = 64
    feature_dim: int = 32
    proj_hidden: int = 64
    steps: int = 3
    step_weights: tuple[float, ...] | None = None
    layer_norm: bool = False
    detach: bool = False
    activation: str = "softmax"
    has_background: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_weights is None:
            self.step_weights = default_step_weights(self.steps)
        self.step_weights = tuple(float(w) for w in self.step_weights)
        if len(self.step_weights) != self.steps:
            raise ValueError(f"{len(self.step_weights)} step weights for {self.steps} steps")
        if any(w <= 0 for w in self.step_weights) or abs(sum(self.step_weights) - 1.0) > 1e-9:
            raise ValueError(f"step weights must be positive and sum to 1, got {self.step_weights}")
        if self.activation not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_classes(self) -> int:
        return self.num_outputs - 1 if self.has_background else self.num_outputs


@dataclass
class RecurrentHead:
    config: HeadConfig
    params: dict[str, np.ndarray]

    @property
    def steps(self) -> int:
        return self.config.steps

    def copy(self) -> "RecurrentHead":
        return RecurrentHead(self.config, {k: v.copy() for k, v in self.params.items()})

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self.config), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path, meta: dict | None = None) -> Path:
        path = Path(path)
        header = {"config": asdict(self.config), "config_hash": self.config_hash(), "meta": meta or {}}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **self.params)
        return path

    @classmethod
    def load(cls, path) -> "RecurrentHead":
        with np.load(path) as z:
            header = json.loads(str(z["__header__"]))
            params = {k: z[k] for k in z.files if k != "__header__"}
        cfg = header["config"]
        if cfg.get("step_weights") is not None:
            cfg["step_weights"] = tuple(cfg["step_weights"])
        return cls(HeadConfig(**cfg), params)


def init_head(config: HeadConfig, seed: int = 0, dtype=np.float64) -> RecurrentHead:
    rng = np.random.default_rng(seed)

    def he(fan_in, fan_out, gain=2.0):
        return (rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)).astype(dtype)

    d_in, h, d, k, hp = (config.input_dim, config.backbone_hidden, config.feature_dim,
                         config.num_outputs, config.proj_hidden)
    params = {
        "W1": he(d_in, h), "b1": np.zeros(h, dtype),
        "W2": he(h, d), "b2": np.zeros(d, dtype),
        "Wc": he(d, k, gain=1.0), "bc": np.zeros(k, dtype),
        "Wp1": he(k, hp), "bp1": np.zeros(hp, dtype),
        "Wp2": np.zeros((hp, d), dtype), "bp2": np.zeros(d, dtype),
    }
    if config.layer_norm:
        params["ln_g"] = np.ones(k, dtype)
        params["ln_b"] = np.zeros(k, dtype)
    return RecurrentHead(config, params)


@dataclass
class ForwardTrace:
    x: np.ndarray
    features: list[np.ndarray]
    logits: list[np.ndarray]
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.logits)


def _layer_norm(z, g, b):
    mu = z.mean(axis=1, keepdims=True)
    centered = z - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + LN_EPS)
    zhat = centered * inv
    return zhat * g + b, (zhat, inv)


def _layer_norm_backward(gu, g, cache):
    zhat, inv = cache
    gz_hat = gu * g
    gz = inv * (gz_hat - gz_hat.mean(axis=1, keepdims=True)
                - zhat * (gz_hat * zhat).mean(axis=1, keepdims=True))
    return gz, (gu * zhat).sum(axis=0), gu.sum(axis=0)


def forward(x, head: RecurrentHead) -> ForwardTrace:
    p, cfg = head.params, head.config
    x = np.atleast_2d(np.asarray(x))
    a1 = x @ p["W1"] + p["b1"]
    h1 = np.maximum(a1, 0.0)
    feats = [h1 @ p["W2"] + p["b2"]]
    logits, proj = [], []
    for r in range(cfg.steps):
        z = feats[r] @ p["Wc"] + p["bc"]
        logits.append(z)
        if r == cfg.steps - 1:
            break
        if cfg.layer_norm:
            u, ln_cache = _layer_norm(z, p["ln_g"], p["ln_b"])
        else:
            u, ln_cache = z, None
        ap = u @ p["Wp1"] + p["bp1"]
        hp = np.maximum(ap, 0.0)
        feats.append(feats[r] + hp @ p["Wp2"] + p["bp2"])
        proj.append((u, ln_cache, ap, hp))
    return ForwardTrace(x=x, features=feats, logits=logits, cache={"a1": a1, "h1": h1, "proj": proj})


def step_alphas(steps: int, alpha: float) -> list[float]:
    return [alpha_schedule(r, steps, alpha) for r in range(1, steps + 1)]


def loss_and_grads(trace: ForwardTrace, y, cm, loss_config: LossConfig, head: RecurrentHead,
                   alpha: float | None = None):
    """Mean-over-batch of ``sum_r w_r * L_cls(z_r)`` and its parameter gradients.

    ``alpha`` overrides ``loss_config.alpha`` as the top of the per-step ramp
    (the trainer passes 0 while PCB is gated off). Returns
    ``(total, grads, step_losses)`` where ``step_losses`` are batch means.
    """
    p, cfg = head.params, head.config
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = trace.x.shape[0]
    top = loss_config.alpha if alpha is None else alpha
    alphas = step_alphas(cfg.steps, top)

    step_losses, dz = [], []
    total = 0.0
    for r, (z, w, a) in enumerate(zip(trace.logits, cfg.step_weights, alphas)):
        lv = classification_loss(z, y, cm, loss_config, a)
        mean = float(lv.value.mean())
        step_losses.append(mean)
        total += w * mean
        dz.append(lv.dlogits * (w / n))

    g = {k: np.zeros_like(v) for k, v in p.items()}
    gx = np.zeros_like(trace.features[-1])
    for r in range(cfg.steps - 1, -1, -1):
        gz = dz[r]
        if r < cfg.steps - 1:
            u, ln_cache, ap, hp = trace.cache["proj"][r]
            gf = gx
            g["Wp2"] += hp.T @ gf
            g["bp2"] += gf.sum(axis=0)
            gap = (gf @ p["Wp2"].T) * (ap > 0)
            g["Wp1"] += u.T @ gap
            g["bp1"] += gap.sum(axis=0)
            gu = gap @ p["Wp1"].T
            if cfg.layer_norm:
                gu, gg, gb = _layer_norm_backward(gu, p["ln_g"], ln_cache)
                g["ln_g"] += gg
                g["ln_b"] += gb
            if not cfg.detach:
                gz = gz + gu
        g["Wc"] += trace.features[r].T @ gz
        g["bc"] += gz.sum(axis=0)
        gx = gx + gz @ p["Wc"].T

    h1, a1 = trace.cache["h1"], trace.cache["a1"]
    g["W2"] += h1.T @ gx
    g["b2"] += gx.sum(axis=0)
    ga1 = (gx @ p["W2"].T) * (a1 > 0)
    g["W1"] += trace.x.T @ ga1
    g["b1"] += ga1.sum(axis=0)
    return total, g, step_losses


def _activate(z, cfg: HeadConfig):
    if cfg.activation == "sigmoid":
        return np.exp(-np.logaddexp(0.0, -z))
    return softmax(z)


def fg_probs(z, cfg: HeadConfig) -> np.ndarray:
    """Foreground class distribution used for confusion statistics.

    Softmax heads renormalise over the foreground logits; sigmoid heads
    normalise their per-class scores to unit sum.
    """
    z = np.atleast_2d(z)
    if cfg.activation == "sigmoid":
        s = _activate(z[:, :cfg.num_classes], cfg)
        return s / s.sum(axis=1, keepdims=True)
    return softmax(z[:, :cfg.num_classes])


def predict(x, head: RecurrentHead, all_steps: bool = False):
    """Class probabilities from the last step (or every step with ``all_steps``)."""
    trace = forward(x, head)
    probs = [_activate(z, head.config) for z in trace.logits]
    return probs if all_steps else probs[-1]


def activation_for(loss_config: LossConfig) -> str:
    return "sigmoid" if loss_config.variant == BCE_PCB else "softmax"
