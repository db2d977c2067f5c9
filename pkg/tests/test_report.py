import json
import math
from pathlib import Path

import numpy as np
import pytest
from matplotlib import colormaps

from pcblab.calib import CalibrationTransform
from pcblab.confmat import ConfusionMatrix, pairwise_bias_norm
from pcblab.datagen import COMMON, FREQUENT, RARE, LongTailDataset, SplitThresholds, synth
from pcblab.head import HeadConfig, RecurrentHead, init_head
from pcblab.report import (HEATMAP_CMAP, TRAIN_CM, VAL_ORACLE_CM, VAL_ORACLE_MS, MetricsReport, build_transform,
                           evaluate, heatmap_color, heatmap_svg, per_step_eval, posthoc_eval, read_table,
                           report_from_probs, write_table)

GOLDEN_SVG = Path(__file__).parent / "data" / "golden_heatmap.svg"
GOLDEN_M = np.array([[0.9, 0.09, 0.01], [0.25, 0.5, 0.25], [0.0, 1e-7, 1.0 - 1e-7]])


@pytest.fixture(scope="module")
def three():
    # counts 200 / 14 / 1 give one class per split
    return synth(num_classes=3, max_count=200, imbalance_ratio=200, feature_dim=3, seed=4, val_per_class=4)


def constant_head(k, favourite):
    head = init_head(HeadConfig(3, k, steps=1), seed=0)
    for v in head.params.values():
        v[...] = 0.0
    head.params["bc"][favourite] = 5.0
    return head


def test_perfect_classifier(three):
    _, y = three.val()
    rep = report_from_probs(np.eye(3)[y], y, three)
    assert rep.acc_overall == rep.acc_frequent == rep.acc_common == rep.acc_rare == 1.0
    np.testing.assert_array_equal(rep.cm_snapshot.m, np.eye(3))
    assert rep.pwb == 0.0


def test_constant_classifier(three):
    assert three.split_of == (FREQUENT, COMMON, RARE)
    rep = evaluate(constant_head(3, 0), three)
    assert rep.per_class_acc == [1.0, 0.0, 0.0]
    assert (rep.acc_frequent, rep.acc_common, rep.acc_rare) == (1.0, 0.0, 0.0)
    assert rep.acc_overall == pytest.approx(1 / 3, abs=1e-15)
    np.testing.assert_array_equal(rep.cm_snapshot.m, [[1, 0, 0], [1, 0, 0], [1, 0, 0]])
    # ||M - M^T||_F with two unit off-diagonal entries on each side
    assert rep.pwb == pytest.approx(2.0, abs=1e-15)


def test_order_invariance(three, rng):
    head = init_head(HeadConfig(3, 3, steps=2), seed=5)
    x, y = three.val()
    perm = rng.permutation(y.size)
    shuffled = LongTailDataset(features=three.features.copy(), labels=three.labels.copy(),
                               partition=three.partition.copy(), class_counts=three.class_counts,
                               split_of=three.split_of, seed=three.seed, thresholds=three.thresholds)
    val_idx = np.flatnonzero(three.partition == "val")
    shuffled.features[val_idx] = three.features[val_idx[perm]]
    shuffled.labels[val_idx] = three.labels[val_idx[perm]]
    a, b = evaluate(head, three), evaluate(head, shuffled)
    assert a.to_dict() == b.to_dict()


def test_identity_transform_bit_equal(three):
    head = init_head(HeadConfig(3, 3, steps=2), seed=6)
    base = evaluate(head, three)
    cal = posthoc_eval(head, three, transform=CalibrationTransform.identity(3))
    assert cal.to_dict()["per_class_acc"] == base.per_class_acc
    assert cal.cm_snapshot == base.cm_snapshot and cal.pwb == base.pwb
    assert cal.acc_overall == base.acc_overall


def test_unknown_source(three):
    with pytest.raises(ValueError, match="source"):
        build_transform(constant_head(3, 0), three, "test_oracle")


def test_calibration_source_recorded(three):
    head = constant_head(3, 0)
    for source in (TRAIN_CM, VAL_ORACLE_CM, VAL_ORACLE_MS):
        assert posthoc_eval(head, three, source).meta["calibration"] == source


def test_per_step_single_step_equals_evaluate(three):
    head = init_head(HeadConfig(3, 3, steps=1), seed=7)
    (only,) = per_step_eval(head, three)
    base = evaluate(head, three)
    assert only.per_class_acc == base.per_class_acc and only.cm_snapshot == base.cm_snapshot
    assert only.meta["step"] == 1


def test_per_step_zero_projection_identical(three):
    head = init_head(HeadConfig(3, 3, steps=3), seed=8)
    reps = per_step_eval(head, three)
    assert len(reps) == 3
    assert all(r.cm_snapshot == reps[0].cm_snapshot for r in reps)


def test_pwb_consistent_with_snapshot(three):
    rep = evaluate(init_head(HeadConfig(3, 3, steps=2), seed=9), three)
    assert rep.pwb == pairwise_bias_norm(rep.cm_snapshot)


def test_report_round_trip(three):
    rep = evaluate(init_head(HeadConfig(3, 3), seed=10), three, meta={"config_hash": "abc", "seed": 1})
    back = MetricsReport.from_dict(rep.to_dict())
    assert back == rep
    assert MetricsReport.from_dict(json.loads(rep.to_json())) == rep


def test_missing_split_reported_as_none():
    ds = synth(num_classes=3, max_count=5, imbalance_ratio=1, feature_dim=3, seed=0, val_per_class=2,
               thresholds=SplitThresholds(10, 100))
    rep = evaluate(constant_head(3, 1), ds)
    assert rep.acc_frequent is None and rep.acc_common is None and rep.acc_rare == pytest.approx(1 / 3)


def test_table_round_trip(tmp_path):
    rows = [{"name": "a", "acc": 0.1, "split": None}, {"name": "b", "acc": 1 / 3, "split": 2}]
    path = write_table(tmp_path / "t.csv", rows, {"seed": 3, "config_hash": "ff"})
    meta, back = read_table(path)
    assert meta == {"config_hash": "ff", "seed": "3"}
    assert [float(r["acc"]) for r in back] == [0.1, 1 / 3]
    assert back[0]["split"] == "" and back[1]["split"] == "2"


def test_heatmap_palette_endpoints():
    lo = colormaps[HEATMAP_CMAP](0.0)
    hi = colormaps[HEATMAP_CMAP](1.0)
    hexed = lambda c: "#{:02x}{:02x}{:02x}".format(*(round(v * 255) for v in c[:3]))
    assert heatmap_color(1.0) == hexed(hi)
    assert heatmap_color(0.0) == heatmap_color(1e-6) == hexed(lo)
    mid = (math.log2(0.5) - math.log2(1e-6)) / -math.log2(1e-6)
    assert heatmap_color(0.5) == hexed(colormaps[HEATMAP_CMAP](mid))


def _fills(svg):
    return [line.split('fill="')[1][:7] for line in svg.splitlines() if line.startswith("<rect")]


def test_heatmap_identity():
    fills = np.array(_fills(heatmap_svg(np.eye(4)))).reshape(4, 4)
    assert len(set(np.diag(fills))) == 1
    off = fills[~np.eye(4, dtype=bool)]
    assert len(set(off)) == 1 and off[0] != fills[0, 0]


def test_heatmap_symmetric(rng):
    a = rng.uniform(0, 1, size=(5, 5))
    fills = np.array(_fills(heatmap_svg((a + a.T) / 2))).reshape(5, 5)
    np.testing.assert_array_equal(fills, fills.T)


def test_heatmap_golden(tmp_path):
    out = tmp_path / "cm.svg"
    heatmap_svg(GOLDEN_M, out, meta={"seed": 0})
    assert out.read_text() == GOLDEN_SVG.read_text()


def test_heatmap_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        heatmap_svg(np.array([[1.5, 0.0], [0.0, 1.0]]))
    with pytest.raises(OSError):
        heatmap_svg(np.eye(2), tmp_path / "missing" / "cm.svg")
