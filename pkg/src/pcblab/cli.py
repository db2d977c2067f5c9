"""Command-line front end: ``pcblab <verb> --spec run.json [--seed N] [--out DIR] [--precision 64|32]``.

Verbs
  synth      write the dataset snapshot
  train      train, then write checkpoint, per-epoch log, report and figures
  eval       evaluate a checkpoint
  calibrate  post-hoc calibration table, (none / MS / CM) x (train / oracle)
  sweep      retrain over a list of values for one ``block.key`` and tabulate
  report     eval + per-step + calibrate bundle for a checkpoint

Every output carries the spec's config hash and seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .calib import MODIFIED, ORIGINAL
from .datagen import DatasetError
from .experiment import ExperimentSpec, SpecError, build_dataset, load_spec, run_experiment
from .head import RecurrentHead
from .report import (NONE, TRAIN_CM, TRAIN_MS, VAL_ORACLE_CM, VAL_ORACLE_MS, MetricsReport, evaluate,
                     heatmap_svg, per_step_eval, posthoc_eval, write_table)
from .trainer import TrainingDiverged

log = logging.getLogger("pcblab")

CHECKPOINT = "checkpoint.npz"
TABLE_COLUMNS = ("acc_overall", "acc_rare", "acc_common", "acc_frequent", "pwb")


class CliError(RuntimeError):
    pass


def _figures():
    # imported lazily so table-only paths never touch matplotlib's pyplot
    from . import plotting
    return plotting


def _out(spec: ExperimentSpec) -> Path:
    out = spec.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _row(report: MetricsReport, **lead) -> dict:
    return {**lead, **{k: getattr(report, k) for k in TABLE_COLUMNS}}


def _emit_report(spec: ExperimentSpec, report: MetricsReport, stem: str, title: str = "") -> list[Path]:
    out, meta = _out(spec), spec.meta()
    report.meta = {**report.meta, **meta}
    paths = [out / f"{stem}.json", out / f"{stem}.csv"]
    paths[0].write_text(report.to_json())
    write_table(paths[1], [_row(report)], meta)
    if spec.outputs["svg"]:
        heatmap_svg(report.cm_snapshot, out / f"{stem}_cm.svg", meta=meta)
        paths.append(out / f"{stem}_cm.svg")
    if spec.outputs["figures"]:
        paths.append(_figures().confusion_png(report.cm_snapshot.m, out / f"{stem}_cm.png", meta, title))
    return paths


def _load_checkpoint(spec: ExperimentSpec, path) -> RecurrentHead:
    path = Path(path) if path else spec.out_dir() / CHECKPOINT
    if not path.exists():
        raise CliError(f"checkpoint {path} not found")
    head = RecurrentHead.load(path)
    dtype = next(iter(head.params.values())).dtype
    if dtype != spec.dtype:
        raise CliError(f"checkpoint {path} holds {dtype} parameters but precision is {spec.precision}")
    return head


def cmd_synth(spec: ExperimentSpec, args) -> list[Path]:
    dataset = build_dataset(spec)
    dataset.source = {**dataset.source, **spec.meta()}
    return list(dataset.save(_out(spec) / "dataset"))


def cmd_train(spec: ExperimentSpec, args) -> list[Path]:
    out, meta = _out(spec), spec.meta()
    exp = run_experiment(spec)
    paths = [exp.result.head.save(out / CHECKPOINT, meta=meta)]
    paths.append(write_table(out / "train_log.csv", exp.result.log, meta))
    ema = exp.result.cm.to_dict()
    paths.append(_write_json(out / "ema_cm.json", {"cm": ema, "meta": meta}))
    _write_json(out / "spec.json", spec.to_dict())
    paths += _emit_report(spec, exp.report, "report", "validation")
    if spec.outputs["figures"]:
        paths.append(_figures().training_curves(exp.result.log, out / "train_curves.png", meta))
    return paths


def cmd_eval(spec: ExperimentSpec, args) -> list[Path]:
    head = _load_checkpoint(spec, args.checkpoint)
    dataset = build_dataset(spec)
    return _emit_report(spec, evaluate(head, dataset, meta=spec.meta()), "eval", "validation")


CALIBRATION_ROWS = (
    ("train", "none", NONE), ("train", "MS", TRAIN_MS), ("train", "CM", TRAIN_CM),
    ("oracle", "none", NONE), ("oracle", "MS", VAL_ORACLE_MS), ("oracle", "CM", VAL_ORACLE_CM),
)


def calibration_table(head, dataset, meta: dict, ms_variant: str = MODIFIED) -> list[tuple[str, str, MetricsReport]]:
    rows = []
    for info_source, calibration, source in CALIBRATION_ROWS:
        variant = {"ms_variant": ms_variant} if calibration == "MS" else {}
        rows.append((info_source, calibration, posthoc_eval(head, dataset, source, meta=meta, **variant)))
    return rows


def cmd_calibrate(spec: ExperimentSpec, args) -> list[Path]:
    out, meta = _out(spec), spec.meta()
    head = _load_checkpoint(spec, args.checkpoint)
    dataset = build_dataset(spec)
    rows = calibration_table(head, dataset, meta, args.ms_variant)
    table = [_row(r, source=src, calibration=cal) for src, cal, r in rows]
    paths = [write_table(out / "calibration.csv", table, {**meta, "ms_variant": args.ms_variant})]
    paths.append(_write_json(out / "calibration.json",
                             {"meta": meta, "rows": [{"source": s, "calibration": c, "report": r.to_dict()}
                                                     for s, c, r in rows]}))
    if spec.outputs["figures"]:
        named = {f"{s}/{c}": r for s, c, r in rows if not (s == "oracle" and c == "none")}
        paths.append(_figures().split_bars(named, out / "calibration.png", meta, "post-hoc calibration"))
    return paths


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _sweep_one(raw: dict) -> dict:
    spec = ExperimentSpec(**raw)
    return run_experiment(spec, log_eval=False).report.to_dict()


def cmd_sweep(spec: ExperimentSpec, args) -> list[Path]:
    if not args.param or not args.values:
        raise CliError("sweep needs --param block.key and --values v1,v2,...")
    values = [_parse_value(v) for v in args.values.split(",")]
    specs = [spec.with_value(args.param, v) for v in values]
    raws = [{**s.to_dict()} for s in specs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            dicts = list(pool.map(_sweep_one, raws))
    else:
        dicts = [_sweep_one(r) for r in raws]
    reports = [MetricsReport.from_dict(d) for d in dicts]
    out, meta = _out(spec), {**spec.meta(), "param": args.param}
    name = args.param.split(".")[-1]
    rows = [{**_row(r, **{name: v}), "config_hash": s.config_hash()} for v, r, s in zip(values, reports, specs)]
    stem = f"sweep_{name}"
    paths = [write_table(out / f"{stem}.csv", rows, meta)]
    if spec.outputs["figures"]:
        paths.append(_figures().sweep_plot(name, values, reports, out / f"{stem}.png", meta))
    return paths


def cmd_report(spec: ExperimentSpec, args) -> list[Path]:
    out, meta = _out(spec), spec.meta()
    head = _load_checkpoint(spec, args.checkpoint)
    dataset = build_dataset(spec)
    paths = _emit_report(spec, evaluate(head, dataset, meta=meta), "eval", "validation")
    steps = per_step_eval(head, dataset, meta=meta)
    paths.append(write_table(out / "steps.csv", [_row(r, step=i) for i, r in enumerate(steps, 1)], meta))
    if spec.outputs["figures"]:
        paths.append(_figures().step_plot(steps, out / "steps.png", meta))
    paths += cmd_calibrate(spec, args)
    return paths


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "calibrate": cmd_calibrate, "sweep": cmd_sweep, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcblab", description="Pairwise class balance laboratory.")
    p.add_argument("verb", choices=sorted(COMMANDS))
    p.add_argument("--spec", required=True, help="experiment spec (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--out", default=None, help="override outputs.dir")
    p.add_argument("--precision", type=int, choices=(64, 32), default=None)
    p.add_argument("--checkpoint", default=None, help=f"defaults to <out>/{CHECKPOINT}")
    p.add_argument("--ms-variant", choices=(MODIFIED, ORIGINAL), default=MODIFIED)
    p.add_argument("--param", default=None, help="sweep parameter as block.key, e.g. loss.alpha")
    p.add_argument("--values", default=None, help="comma-separated sweep values (JSON literals)")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = load_spec(args.spec, seed=args.seed, out=args.out, precision=args.precision)
        paths = COMMANDS[args.verb](spec, args)
    except SpecError as exc:
        print(f"pcblab: invalid spec: {exc}", file=sys.stderr)
        return 2
    except (CliError, DatasetError, TrainingDiverged, OSError) as exc:
        print(f"pcblab: {exc}", file=sys.stderr)
        return 1
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
