"""Experiment specs: parsing, validation, hashing and the objects they build.

A spec is a JSON object with the blocks ``dataset``, ``head``, ``loss``,
``train`` and ``outputs`` plus top-level ``seed`` and ``precision``. Every key
is checked; unknown or ill-typed entries raise :class:`SpecError` naming the
offending field path (``loss.alpha``, ``dataset.layout`` ...).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import LAYOUTS, SHUFFLED, LongTailDataset, SplitThresholds, TabularSchema, ingest_tabular, synth
from .head import HeadConfig, RecurrentHead, activation_for, init_head
from .losses import BSCE, LossConfig
from .report import MetricsReport, evaluate
from .trainer import TrainConfig, TrainResult, run_training


class SpecError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


NUM = (int, float)
SYNTH_KEYS = {
    "kind": str, "num_classes": int, "max_count": int, "imbalance_ratio": NUM,
    "feature_dim": int, "confusability": NUM, "val_per_class": int, "layout": str,
    "rare_max": int, "common_max": int,
}
TABULAR_KEYS = {
    "kind": str, "path": str, "label_column": str, "num_classes": (int, type(None)), "delimiter": str,
    "val_per_class": int, "rare_max": int, "common_max": int,
}
SNAPSHOT_KEYS = {"kind": str, "path": str}
HEAD_KEYS = {
    "backbone_hidden": int, "feature_dim": int, "proj_hidden": int, "steps": int,
    "step_weights": (list, type(None)), "layer_norm": bool, "detach": bool,
}
LOSS_KEYS = {
    "variant": str, "alpha": NUM, "smoothing": NUM, "class_weights": (list, type(None)),
    "seesaw_S": (list, type(None)), "class_priors": (list, str, type(None)), "target_mode": str,
    "bce_normalize": bool,
}
TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "lr": NUM, "momentum": NUM, "weight_decay": NUM,
    "warmup_epochs": int, "warmup_per_iter": bool, "decay_epochs": list, "decay_factor": NUM,
    "sampler": str, "rf_threshold": NUM, "pcb_start_epoch": int, "decoupled": bool, "gamma": NUM,
    "alpha": (int, float, type(None)), "eval_every": int,
}
OUTPUT_KEYS = {"dir": str, "figures": bool, "svg": bool}
TOP_KEYS = {"dataset", "head", "loss", "train", "outputs", "seed", "precision"}

DEFAULT_SPEC = {
    "seed": 0,
    "precision": 64,
    "dataset": {
        "kind": "synth", "num_classes": 30, "max_count": 1000, "imbalance_ratio": 100.0,
        "feature_dim": 16, "confusability": 0.1, "val_per_class": 50, "layout": SHUFFLED,
        "rare_max": 10, "common_max": 100,
    },
    "head": {
        "backbone_hidden": 64, "feature_dim": 32, "proj_hidden": 64, "steps": 3,
        "step_weights": None, "layer_norm": False, "detach": False,
    },
    "loss": {"variant": "pcb_ce", "alpha": 0.4},
    "train": {},
    "outputs": {"dir": "runs/default", "figures": True, "svg": True},
}

# the standard desk fixture used by the acceptance suite
DESK_OVERRIDES = {
    "dataset": {"confusability": 0.075, "rare_max": 20, "common_max": 200},
    "head": {"layer_norm": True},
    "train": {"pcb_start_epoch": 10},
    "outputs": {"dir": "runs/desk"},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def desk_spec(**blocks) -> dict:
    """Raw desk-fixture spec; keyword blocks are merged on top."""
    return _merge(_merge(DEFAULT_SPEC, DESK_OVERRIDES), blocks)


def _check_block(block, allowed: dict, path: str):
    if not isinstance(block, dict):
        raise SpecError(path, f"expected an object, got {type(block).__name__}")
    for k, v in block.items():
        if k not in allowed:
            raise SpecError(f"{path}.{k}", f"unknown key (allowed: {', '.join(sorted(allowed))})")
        want = allowed[k]
        if want is None:
            continue
        if isinstance(v, bool) and (want is int or want == NUM or (isinstance(want, tuple) and int in want)):
            raise SpecError(f"{path}.{k}", f"expected a number, got {v!r}")
        if not isinstance(v, want):
            names = "/".join(t.__name__ for t in (want if isinstance(want, tuple) else (want,)))
            raise SpecError(f"{path}.{k}", f"expected {names}, got {type(v).__name__}")


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: dict
    head: dict
    loss: dict
    train: dict
    outputs: dict
    seed: int
    precision: int

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def content(self) -> dict:
        """Everything that determines the numbers, i.e. all but ``outputs``."""
        return copy.deepcopy({"dataset": self.dataset, "head": self.head, "loss": self.loss,
                              "train": self.train, "seed": self.seed, "precision": self.precision})

    def config_hash(self) -> str:
        blob = json.dumps(self.content(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def meta(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed}

    def out_dir(self) -> Path:
        return Path(self.outputs["dir"])

    def to_dict(self) -> dict:
        return {**self.content(), "outputs": copy.deepcopy(self.outputs)}

    def with_value(self, dotted: str, value) -> "ExperimentSpec":
        """Copy with one ``block.key`` replaced, re-validated."""
        raw = self.to_dict()
        parts = dotted.split(".")
        node = raw
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise SpecError(dotted, "not a block.key path")
            node = node[p]
        node[parts[-1]] = value
        return parse_spec(raw)


def parse_spec(raw: dict, seed: int | None = None, out: str | None = None,
               precision: int | None = None) -> ExperimentSpec:
    """Validate a raw spec, fill defaults and apply command-line overrides."""
    if not isinstance(raw, dict):
        raise SpecError("spec", "top level must be an object")
    for k in raw:
        if k not in TOP_KEYS:
            raise SpecError(k, f"unknown key (allowed: {', '.join(sorted(TOP_KEYS))})")
    ds_raw = raw.get("dataset", {})
    kind = ds_raw.get("kind", "synth") if isinstance(ds_raw, dict) else None
    ds_keys = {"synth": SYNTH_KEYS, "tabular": TABULAR_KEYS, "snapshot": SNAPSHOT_KEYS}.get(kind)
    if ds_keys is None:
        raise SpecError("dataset.kind", f"expected synth, tabular or snapshot, got {kind!r}")
    _check_block(ds_raw, ds_keys, "dataset")
    for name, allowed in (("head", HEAD_KEYS), ("loss", LOSS_KEYS), ("train", TRAIN_KEYS),
                          ("outputs", OUTPUT_KEYS)):
        _check_block(raw.get(name, {}), allowed, name)

    if kind == "synth":
        dataset = _merge(DEFAULT_SPEC["dataset"], ds_raw)
        if dataset["layout"] not in LAYOUTS:
            raise SpecError("dataset.layout", f"expected one of {LAYOUTS}, got {dataset['layout']!r}")
    elif kind == "tabular":
        dataset = _merge({"kind": "tabular", "label_column": "label", "num_classes": None, "delimiter": ",",
                          "val_per_class": 0, "rare_max": 10, "common_max": 100}, ds_raw)
    else:
        dataset = dict(ds_raw)
    if kind in ("tabular", "snapshot") and "path" not in dataset:
        raise SpecError("dataset.path", "required")

    spec = ExperimentSpec(
        dataset=dataset,
        head=_merge(DEFAULT_SPEC["head"], raw.get("head", {})),
        loss=_merge(DEFAULT_SPEC["loss"], raw.get("loss", {})),
        train=dict(raw.get("train", {})),
        outputs=_merge(DEFAULT_SPEC["outputs"], raw.get("outputs", {})),
        seed=raw.get("seed", 0) if seed is None else seed,
        precision=raw.get("precision", 64) if precision is None else precision,
    )
    if out is not None:
        spec.outputs["dir"] = str(out)
    if not isinstance(spec.seed, int) or isinstance(spec.seed, bool) or not 0 <= spec.seed < 2 ** 63:
        raise SpecError("seed", f"expected a non-negative 64-bit integer, got {spec.seed!r}")
    if spec.precision not in (32, 64):
        raise SpecError("precision", f"expected 32 or 64, got {spec.precision!r}")
    # surface value errors from the dataclasses with their block path
    try:
        thresholds(spec)
    except ValueError as exc:
        raise SpecError("dataset", str(exc)) from None
    for name, build in (("head", _head_config_kwargs), ("loss", _loss_kwargs), ("train", train_config)):
        try:
            if name == "head":
                HeadConfig(input_dim=1, num_outputs=2, **build(spec))
            elif name == "loss":
                LossConfig(**build(spec, None))
            else:
                build(spec)
        except (TypeError, ValueError) as exc:
            raise SpecError(name, str(exc)) from None
    return spec


def load_spec(path, **overrides) -> ExperimentSpec:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise SpecError(str(path), "spec file not found") from None
    except json.JSONDecodeError as exc:
        raise SpecError(str(path), f"invalid JSON ({exc})") from None
    return parse_spec(raw, **overrides)


# seeds for the three random streams are fixed offsets of the spec seed
def dataset_seed(spec: ExperimentSpec) -> int:
    return spec.seed


def init_seed(spec: ExperimentSpec) -> int:
    return spec.seed + 1


def train_seed(spec: ExperimentSpec) -> int:
    return spec.seed + 2


def thresholds(spec: ExperimentSpec) -> SplitThresholds:
    d = spec.dataset
    return SplitThresholds(d.get("rare_max", 10), d.get("common_max", 100))


def build_dataset(spec: ExperimentSpec) -> LongTailDataset:
    d = spec.dataset
    if d["kind"] == "synth":
        ds = synth(num_classes=d["num_classes"], max_count=d["max_count"], imbalance_ratio=d["imbalance_ratio"],
                   feature_dim=d["feature_dim"], confusability=d["confusability"], seed=dataset_seed(spec),
                   val_per_class=d["val_per_class"], thresholds=thresholds(spec), layout=d["layout"])
    elif d["kind"] == "tabular":
        path = Path(d["path"])
        if not path.exists():
            raise SpecError("dataset.path", f"{path} does not exist")
        schema = TabularSchema(d["label_column"], d["num_classes"], d["delimiter"])
        ds = ingest_tabular(path, schema, seed=dataset_seed(spec), val_per_class=d["val_per_class"],
                            thresholds=thresholds(spec))
    else:
        stem = Path(d["path"])
        if not stem.with_suffix(".npz").exists():
            raise SpecError("dataset.path", f"{stem.with_suffix('.npz')} does not exist")
        ds = LongTailDataset.load(stem)
    return ds.astype(spec.dtype)


def _head_config_kwargs(spec: ExperimentSpec) -> dict:
    h = dict(spec.head)
    if h.get("step_weights") is not None:
        h["step_weights"] = tuple(h["step_weights"])
    return h


def head_config(spec: ExperimentSpec, dataset: LongTailDataset) -> HeadConfig:
    return HeadConfig(input_dim=dataset.feature_dim, num_outputs=dataset.num_classes,
                      activation=activation_for(LossConfig(**_loss_kwargs(spec, None))),
                      **_head_config_kwargs(spec))


def build_head(spec: ExperimentSpec, dataset: LongTailDataset) -> RecurrentHead:
    return init_head(head_config(spec, dataset), seed=init_seed(spec), dtype=spec.dtype)


def _loss_kwargs(spec: ExperimentSpec, dataset: LongTailDataset | None) -> dict:
    kw = dict(spec.loss)
    priors = kw.get("class_priors")
    if priors == "train_counts":
        kw["class_priors"] = None if dataset is None else dataset.class_counts.astype(np.float64)
    elif isinstance(priors, str):
        raise ValueError(f"class_priors must be a list or 'train_counts', got {priors!r}")
    if kw.get("variant") == BSCE and priors is None:
        raise ValueError("bsce needs class_priors (a list or 'train_counts')")
    return kw


def build_loss(spec: ExperimentSpec, dataset: LongTailDataset) -> LossConfig:
    return LossConfig(**_loss_kwargs(spec, dataset))


def train_config(spec: ExperimentSpec) -> TrainConfig:
    return TrainConfig(**{**spec.train, "seed": train_seed(spec)})


def epoch_evaluator(dataset: LongTailDataset):
    """Per-epoch hook logging validation split accuracy and PwB."""

    def hook(head, epoch):
        r = evaluate(head, dataset)
        return {"acc_overall": r.acc_overall, "acc_frequent": r.acc_frequent, "acc_common": r.acc_common,
                "acc_rare": r.acc_rare, "pwb": r.pwb}

    return hook


@dataclass
class Experiment:
    spec: ExperimentSpec
    dataset: LongTailDataset
    result: TrainResult
    report: MetricsReport


def run_experiment(spec: ExperimentSpec, dataset: LongTailDataset | None = None,
                   log_eval: bool = True) -> Experiment:
    """Build, train and evaluate one spec."""
    dataset = build_dataset(spec) if dataset is None else dataset
    head = build_head(spec, dataset)
    result = run_training(dataset, head, build_loss(spec, dataset), train_config(spec),
                          evaluate=epoch_evaluator(dataset) if log_eval else None)
    report = evaluate(result.head, dataset, meta=spec.meta())
    return Experiment(spec, dataset, result, report)
