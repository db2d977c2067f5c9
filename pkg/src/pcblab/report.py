"""Evaluation, post-hoc calibration studies and report export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib import colormaps

from .calib import MODIFIED, CalibrationTransform
from .confmat import HARD, SOFT, ConfusionMatrix, accumulate, pairwise_bias_norm
from .datagen import COMMON, FREQUENT, RARE, VAL, LongTailDataset
from .head import RecurrentHead, fg_probs, forward

NONE = "none"
TRAIN_CM, VAL_ORACLE_CM, TRAIN_MS, VAL_ORACLE_MS = "train_cm", "val_oracle_cm", "train_ms", "val_oracle_ms"
SOURCES = (NONE, TRAIN_CM, VAL_ORACLE_CM, TRAIN_MS, VAL_ORACLE_MS)

HEATMAP_EPS = 1e-6
HEATMAP_CMAP = "magma"
CSV_FIELDS = ("acc_overall", "acc_frequent", "acc_common", "acc_rare", "pwb")


@dataclass
class MetricsReport:
    acc_overall: float
    acc_frequent: float | None
    acc_common: float | None
    acc_rare: float | None
    pwb: float
    per_class_acc: list[float]
    cm_snapshot: ConfusionMatrix
    meta: dict = field(default_factory=dict)

    def split_acc(self, split: str) -> float | None:
        return {FREQUENT: self.acc_frequent, COMMON: self.acc_common, RARE: self.acc_rare}[split]

    def to_dict(self) -> dict:
        return {
            "acc_overall": self.acc_overall,
            "acc_frequent": self.acc_frequent,
            "acc_common": self.acc_common,
            "acc_rare": self.acc_rare,
            "pwb": self.pwb,
            "per_class_acc": list(self.per_class_acc),
            "cm_snapshot": self.cm_snapshot.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["cm_snapshot"] = ConfusionMatrix.from_dict(d["cm_snapshot"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


def _mean_or_none(values):
    return float(np.mean(values)) if len(values) else None


def report_from_probs(probs, labels, dataset: LongTailDataset, meta: dict | None = None) -> MetricsReport:
    """Hard confusion matrix and split-wise accuracy from foreground probabilities."""
    c = dataset.num_classes
    labels = np.asarray(labels, dtype=np.int64)
    cm = accumulate(probs, labels, HARD, num_classes=c)
    per_class = np.diag(cm.m)
    observed = cm.counts > 0
    preds = np.asarray(probs).argmax(axis=1)
    splits = {}
    for split in (FREQUENT, COMMON, RARE):
        members = [k for k in dataset.split_members(split) if observed[k]]
        splits[split] = _mean_or_none(per_class[members])
    return MetricsReport(
        acc_overall=float(np.mean(preds == labels)),
        acc_frequent=splits[FREQUENT],
        acc_common=splits[COMMON],
        acc_rare=splits[RARE],
        pwb=pairwise_bias_norm(cm),
        per_class_acc=[float(a) for a in per_class],
        cm_snapshot=cm,
        meta=dict(meta or {}),
    )


def _probs(head: RecurrentHead, x, step: int = -1):
    return fg_probs(forward(x, head).logits[step], head.config)


def evaluate(head: RecurrentHead, dataset: LongTailDataset, partition: str = VAL, meta=None,
             step: int = -1) -> MetricsReport:
    x, y = dataset.subset(partition)
    if y.size == 0:
        raise ValueError(f"partition {partition!r} is empty")
    return report_from_probs(_probs(head, x, step), y, dataset, meta)


def per_step_eval(head: RecurrentHead, dataset: LongTailDataset, partition: str = VAL,
                  meta=None) -> list[MetricsReport]:
    x, y = dataset.subset(partition)
    trace = forward(x, head)
    out = []
    for r, z in enumerate(trace.logits, start=1):
        out.append(report_from_probs(fg_probs(z, head.config), y, dataset, {**(meta or {}), "step": r}))
    return out


def build_transform(head: RecurrentHead, dataset: LongTailDataset, source: str,
                    ms_variant: str = MODIFIED, cm_mode: str = SOFT,
                    suppress_threshold: float = 1e-3) -> CalibrationTransform | None:
    """Calibration transform from train statistics or the validation oracle."""
    if source not in SOURCES:
        raise ValueError(f"unknown calibration source {source!r}; expected one of {SOURCES}")
    if source == NONE:
        return None
    part = "train" if source in (TRAIN_CM, TRAIN_MS) else VAL
    x, y = dataset.subset(part)
    stats = accumulate(_probs(head, x), y, cm_mode, num_classes=dataset.num_classes)
    if source in (TRAIN_CM, VAL_ORACLE_CM):
        return CalibrationTransform.from_confusion(stats)
    return CalibrationTransform.from_mean_scores(stats, ms_variant, suppress_threshold)


def posthoc_eval(head: RecurrentHead, dataset: LongTailDataset, source: str = VAL_ORACLE_CM,
                 transform: CalibrationTransform | None = None, meta=None, **variant) -> MetricsReport:
    """Calibrate every validation prediction and report.

    Pass ``transform`` to use a ready-made transform instead of ``source``.
    """
    if transform is None:
        transform = build_transform(head, dataset, source, **variant)
    else:
        source = "custom"
    x, y = dataset.val()
    probs = _probs(head, x)
    if transform is not None:
        probs = transform(probs)
    return report_from_probs(probs, y, dataset, {**(meta or {}), "calibration": source})


def heatmap_color(value: float) -> str:
    """Hex fill for one matrix entry: lightness follows ``log2(max(v, 1e-6))``."""
    lo = math.log2(HEATMAP_EPS)
    frac = (math.log2(max(float(value), HEATMAP_EPS)) - lo) / -lo
    frac = min(max(frac, 0.0), 1.0)
    r, g, b, _ = colormaps[HEATMAP_CMAP](frac)
    return "#{:02x}{:02x}{:02x}".format(round(r * 255), round(g * 255), round(b * 255))


def heatmap_svg(cm, path=None, cell: int = 16, meta: dict | None = None) -> str:
    """Render a confusion matrix as an SVG grid (row = true class, column = prediction)."""
    m = np.asarray(cm.m if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("heatmap entries must lie in [0, 1]")
    c = m.shape[0]
    size = c * cell
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}" shape-rendering="crispEdges">',
    ]
    if meta:
        desc = " ".join(f"{k}={meta[k]}" for k in sorted(meta))
        lines.append(f"<desc>{desc}</desc>")
    for i in range(c):
        for j in range(c):
            lines.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{heatmap_color(m[i, j])}"/>')
    lines.append("</svg>")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, rows: list[dict], meta: dict | None = None) -> Path:
    """Comma-delimited table; a leading ``#`` line carries the run metadata."""
    path = Path(path)
    buf = io.StringIO()
    if meta:
        buf.write("# " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)) + "\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    path.write_text(buf.getvalue())
    return path


def read_table(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    meta = {}
    if lines and lines[0].startswith("# "):
        meta = dict(tok.split("=", 1) for tok in lines[0][2:].split())
        lines = lines[1:]
    return meta, list(csv.DictReader(lines))
