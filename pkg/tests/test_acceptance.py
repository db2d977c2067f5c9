"""Acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line (collected into the terminal summary)
and then asserts. Thresholds live in ``data/desk_baseline.json``. Criteria 4-8
share one set of desk-fixture runs built by the module fixture.
"""

import json
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

import test_head
import test_losses
from fdcheck import REL_TOL, numeric_grad, rel_error
from oracles import ORACLES, TOL
from pcblab.cli import main as cli_main
from pcblab.confmat import ConfusionMatrix, softmax
from pcblab.datagen import synth
from pcblab.experiment import build_dataset, desk_spec, parse_spec, run_experiment
from pcblab.head import HeadConfig, forward, init_head, loss_and_grads
from pcblab.losses import CE, PCB_CE, SEESAW_PCB, LossConfig, ce, combined_cls, label_smooth, seesaw_pcb
from pcblab.report import VAL_ORACLE_CM, VAL_ORACLE_MS, TRAIN_CM, per_step_eval, posthoc_eval
from pcblab.trainer import TrainConfig, run_training

PINS = json.loads((Path(__file__).parent / "data" / "desk_baseline.json").read_text())
TH = PINS["thresholds"]
T0 = time.perf_counter()

pytestmark = pytest.mark.slow


def verdict(log, n, title, checks):
    ok = all(c for _, c in checks)
    detail = "; ".join(f"{d} [{'ok' if c else 'NO'}]" for d, c in checks)
    line = f"{'PASS' if ok else 'FAIL'} acceptance {n:>2} {title}: {detail}"
    log.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def desk():
    base = parse_spec(desk_spec(seed=PINS["seed"]))
    ds = build_dataset(base)
    ce_spec = base.with_value("loss.variant", CE).with_value("head.steps", 1)
    ce_run = run_experiment(ce_spec, ds, log_eval=False)
    pcb = run_experiment(base, ds, log_eval=False)
    dec_ce = run_experiment(base.with_value("loss.variant", CE).with_value("train.decoupled", True), ds,
                            log_eval=False)
    dec_pcb = run_experiment(base.with_value("train.decoupled", True), ds, log_eval=False)
    head = ce_run.result.head
    return SimpleNamespace(
        spec=base, dataset=ds, ce=ce_run.report, pcb=pcb.report,
        oracle_cm=posthoc_eval(head, ds, VAL_ORACLE_CM), oracle_ms=posthoc_eval(head, ds, VAL_ORACLE_MS),
        train_cm=posthoc_eval(head, ds, TRAIN_CM), steps=per_step_eval(pcb.result.head, ds),
        dec_ce=dec_ce.report, dec_pcb=dec_pcb.report,
    )


def test_criterion_01_math_oracles(acceptance_log):
    worst, bad = 0.0, []
    for name, compute, expected in ORACLES:
        err = float(np.max(np.abs(np.asarray(compute(), dtype=float) - np.asarray(expected, dtype=float))))
        worst = max(worst, err)
        if not err <= TOL:
            bad.append(name)
    assert verdict(acceptance_log, 1, "hand-computed oracles",
                   [(f"{len(ORACLES)} examples, worst abs error {worst:.2e} <= {TOL:g}", not bad)]), bad


def test_criterion_02_gradients(acceptance_log):
    loss_worst, cases = {}, 0
    for variant in test_losses.VARIANTS:
        for seed in range(test_losses.N_CASES):
            loss, z = test_losses.make_case(variant, seed)
            err = rel_error(loss(z).dlogits, numeric_grad(lambda v: loss(v).value, z))
            loss_worst[variant] = max(loss_worst.get(variant, 0.0), err)
    head_worst = {}
    for seed in range(test_head.N_HEAD_CASES):
        head, x, y, cm, cfg = test_head.fd_case(seed)
        _, grads, _ = loss_and_grads(forward(x, head), y, cm, cfg, head)
        for name, p in head.params.items():
            def total(v, name=name):
                h = head.copy()
                h.params[name] = v
                return loss_and_grads(forward(x, h), y, cm, cfg, h)[0]
            err = rel_error(grads[name], numeric_grad(total, p))
            head_worst[head.steps] = max(head_worst.get(head.steps, 0.0), err)
        cases += 1
    lw, hw = max(loss_worst.values()), max(head_worst.values())
    checks = [
        (f"{len(loss_worst)} loss variants x {test_losses.N_CASES} cases, worst {lw:.1e}", lw < REL_TOL),
        (f"head R in {sorted(head_worst)} over {cases} cases, worst {hw:.1e}", hw < REL_TOL and cases >= 100),
    ]
    assert verdict(acceptance_log, 2, f"finite differences (rel < {REL_TOL:g})", checks)


def _same(a, b):
    return np.array_equal(a.value, b.value) and np.array_equal(a.dlogits, b.dlogits)


def test_criterion_03_degenerations(acceptance_log):
    rng = np.random.default_rng(5)
    z, y = rng.normal(size=(32, 6)) * 3, rng.integers(0, 6, 32)
    cm = ConfusionMatrix(softmax(rng.normal(size=(6, 6)), axis=1))

    ds = synth(num_classes=5, max_count=40, imbalance_ratio=10, feature_dim=4, seed=1, val_per_class=4)
    head = init_head(HeadConfig(4, 5, backbone_hidden=8, feature_dim=6, proj_hidden=6, steps=3, layer_norm=True),
                     seed=2)
    tc = TrainConfig(epochs=4, batch_size=16, lr=0.05, decay_epochs=(3,), pcb_start_epoch=0, seed=3)
    a = run_training(ds, head, LossConfig(variant=PCB_CE, alpha=0.0), tc).head
    b = run_training(ds, head, LossConfig(variant=CE), tc).head
    training_equal = all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    one = init_head(HeadConfig(5, 4, steps=1), seed=4)
    x = rng.normal(size=(9, 5))
    p = one.params
    plain = (np.maximum(x @ p["W1"] + p["b1"], 0) @ p["W2"] + p["b2"]) @ p["Wc"] + p["bc"]
    mlp_equal = np.array_equal(forward(x, one).logits[0], plain)

    checks = [
        ("alpha=0 training == CE training", training_equal),
        ("identity-matrix targets == CE", _same(combined_cls(z, y, ConfusionMatrix.identity(6), LossConfig(), 0.7),
                                                ce(z, y))),
        ("R=1, zero projection == plain MLP", mlp_equal),
        ("unit Seesaw == softmax form", _same(seesaw_pcb(z, y, cm, LossConfig(variant=SEESAW_PCB), 0.4),
                                              combined_cls(z, y, cm, LossConfig(), 0.4))),
        ("smoothing=0 == CE", _same(label_smooth(z, y, 0.0), ce(z, y))),
    ]
    assert verdict(acceptance_log, 3, "bit-exact degenerations", checks)


def test_criterion_04_oracle_cm_calibration(desk, acceptance_log):
    ce_, cm, ms = desk.ce, desk.oracle_cm, desk.oracle_ms
    lo, hi = TH["ce_rare_band"]
    gap = cm.acc_rare - ms.acc_rare
    drop = ce_.acc_overall - cm.acc_overall
    checks = [
        (f"CE rare {ce_.acc_rare:.3f} in [{lo}, {hi}]", lo <= ce_.acc_rare <= hi),
        (f"CM rare {cm.acc_rare:.3f} > none {ce_.acc_rare:.3f}", cm.acc_rare > ce_.acc_rare),
        (f"CM rare {cm.acc_rare:.3f} > MS {ms.acc_rare:.3f}", gap > TH["cm_ms_rare_gap_min"]),
        (f"overall drop {drop:+.3f} <= {TH['overall_degradation_max']}", drop <= TH["overall_degradation_max"]),
    ]
    assert verdict(acceptance_log, 4, "oracle CM calibration", checks)


def test_criterion_05_train_cm_vs_online(desk, acceptance_log):
    t, p = desk.train_cm, desk.pcb
    checks = [(f"train-CM rare {t.acc_rare:.3f} < online PCB rare {p.acc_rare:.3f}", t.acc_rare < p.acc_rare)]
    assert verdict(acceptance_log, 5, "train CM vs online PCB", checks)


def test_criterion_06_pwb_reduction(desk, acceptance_log):
    ce_, p = desk.ce, desk.pcb
    red = (ce_.pwb - p.pwb) / ce_.pwb
    fd = abs(p.acc_frequent - ce_.acc_frequent)
    checks = [
        (f"PwB {ce_.pwb:.3f} -> {p.pwb:.3f}, reduction {red:.1%} >= {TH['pwb_reduction_min']:.0%}",
         red >= TH["pwb_reduction_min"]),
        (f"rare {ce_.acc_rare:.3f} -> {p.acc_rare:.3f}", p.acc_rare > ce_.acc_rare),
        (f"frequent shift {fd:.3f} <= {TH['frequent_tolerance']}", fd <= TH["frequent_tolerance"]),
    ]
    assert verdict(acceptance_log, 6, "PCB pairwise-bias reduction", checks)


def test_criterion_07_per_step(desk, acceptance_log):
    rare = [r.acc_rare for r in desk.steps]
    checks = [(f"rare by step {[round(v, 3) for v in rare]}, last >= first", rare[-1] >= rare[0])]
    assert verdict(acceptance_log, 7, "per-step rare accuracy", checks)


def test_criterion_08_decoupled(desk, acceptance_log):
    c, p = desk.dec_ce, desk.dec_pcb
    margin = p.acc_rare - c.acc_rare
    checks = [(f"rare {c.acc_rare:.3f} -> {p.acc_rare:.3f}, margin {margin:.3f} >= {TH['decoupled_margin_min']}",
               margin >= TH["decoupled_margin_min"])]
    assert verdict(acceptance_log, 8, "decoupled PCB", checks)


def test_criterion_09_determinism(tmp_path, acceptance_log):
    raw = desk_spec(seed=PINS["seed"])
    raw["outputs"] = {"dir": str(tmp_path / "run"), "figures": True, "svg": True}
    spec = tmp_path / "desk.json"
    spec.write_text(json.dumps(raw))
    runs = []
    for _ in range(2):
        codes = [cli_main(["train", "--spec", str(spec)]), cli_main(["report", "--spec", str(spec)])]
        files = {p.name: p.read_bytes() for p in sorted((tmp_path / "run").iterdir()) if p.is_file()}
        runs.append((codes, files))
    (ca, fa), (cb, fb) = runs
    differing = [k for k in fa if fa.get(k) != fb.get(k)]
    checks = [
        ("both runs exit 0", ca == cb == [0, 0]),
        (f"{len(fa)} output files byte-identical", fa.keys() == fb.keys() and not differing),
    ]
    assert verdict(acceptance_log, 9, "determinism", checks), differing


def test_criterion_10_runtime(acceptance_log):
    elapsed = time.perf_counter() - T0
    checks = [(f"suite ran in {elapsed:.0f} s < {TH['runtime_budget_s']} s", elapsed < TH["runtime_budget_s"])]
    assert verdict(acceptance_log, 10, "runtime budget", checks)


def test_oracle_cm_beats_uncalibrated_and_train_cm(desk):
    assert desk.oracle_cm.acc_rare > desk.ce.acc_rare
    assert desk.oracle_cm.acc_rare >= desk.train_cm.acc_rare


def test_pcb_run_rare_non_decreasing_over_steps(desk):
    rare = [r.acc_rare for r in desk.steps]
    assert all(b >= a for a, b in zip(rare, rare[1:]))
