import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidar_ood import metrics
from lidar_ood.errors import EmptyStratum, EmptyThresholds, SingleClassSet
from lidar_ood.metrics import (ScoredSet, auroc, aupr_in, aupr_out, balanced_eval, detection_error,
                               evaluate, fpr_at_95_tpr, interpolated_ap, ood_threshold_sweep)
from fixtures import CLASSES, sweep_fixture
from oracles import (aupr_enum, auroc_pairs, confusion, detection_error_enum, fpr95_enum,
                     sweep_recount)


def labels(n_id, n_ood):
    return np.r_[np.zeros(n_id, bool), np.ones(n_ood, bool)]


def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], labels(2, 2)) == 1.0
    assert auroc([0.5] * 6, labels(3, 3)) == 0.5
    assert auroc([0.1, 0.2, 0.3, 0.25, 0.4], labels(3, 2)) == pytest.approx(5 / 6, abs=1e-15)


def test_perfect_separation_all_metrics():
    y = labels(30, 30)
    s = np.r_[np.linspace(0, 1, 30), np.linspace(2, 3, 30)]
    r = evaluate(s, y)
    assert (r.auroc, r.aupr_in, r.aupr_out, r.fpr_at_95_tpr) == (1.0, 1.0, 1.0, 0.0)
    assert r.detection_error == 0.025


def test_single_class_raises():
    for fn in (auroc, aupr_in, aupr_out, fpr_at_95_tpr, detection_error):
        with pytest.raises(SingleClassSet):
            fn([0.1, 0.2], [False, False])


def test_aupr_baseline(rng):
    y = rng.uniform(size=20000) < 0.3
    assert aupr_out(rng.uniform(size=20000), y) == pytest.approx(0.3, abs=0.02)


def test_aupr_hand_set():
    s, y = [0.9, 0.8, 0.7, 0.6, 0.5], [True, False, True, False, False]
    # precision 1 at recall .5, then 2/3 at recall 1
    assert aupr_out(s, y) == pytest.approx(0.5 * 1 + 0.5 * 2 / 3, abs=1e-15)
    assert aupr_out(s, y) == pytest.approx(aupr_enum(s, y), abs=1e-15)
    assert aupr_in(s, y) == pytest.approx(aupr_enum(s, y, "id"), abs=1e-15)


def test_detection_error_formula():
    # 20 OOD scores 1..20 (TPR 0.95 at t=2), 10 ID scores with 2 at or above 2
    s = list(range(1, 21)) + [0, 0, 0, 0, 0, 0, 0, 0, 2, 5]
    y = labels(0, 20).tolist() + [False] * 10
    assert fpr_at_95_tpr(s, y) == pytest.approx(0.2)
    assert detection_error(s, y) == pytest.approx(0.125, abs=1e-15)


def test_fpr95_identical_distributions(rng):
    x = rng.uniform(size=5000)
    assert fpr_at_95_tpr(np.r_[x, x], labels(5000, 5000)) == pytest.approx(0.95, abs=0.001)


def test_confusion_oracle_at_operating_point(rng):
    s = np.round(rng.normal(size=200), 1)
    y = rng.uniform(size=200) < 0.4
    t = metrics.operating_threshold(s, y)
    tp, fp, fn, tn = confusion(s, y, t)
    assert tp / (tp + fn) >= 0.95
    assert fpr_at_95_tpr(s, y) == fp / (fp + tn)
    assert detection_error(s, y) == pytest.approx(0.5 * 0.05 + 0.5 * fp / (fp + tn), abs=1e-15)


def test_hand_fixture_40_scores(rng):
    s = np.round(rng.uniform(size=40), 1)
    y = np.arange(40) % 3 == 0
    assert fpr_at_95_tpr(s, y) == fpr95_enum(s, y)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 12), st.booleans()), min_size=2, max_size=60))
def test_metrics_match_enumeration(pairs):
    s = np.array([p[0] for p in pairs], dtype=float) / 4
    y = np.array([p[1] for p in pairs])
    if y.all() or not y.any():
        return
    assert abs(auroc(s, y) - auroc_pairs(s, y)) <= 1e-12
    assert abs(aupr_out(s, y) - aupr_enum(s, y)) <= 1e-12
    assert abs(aupr_in(s, y) - aupr_enum(s, y, "id")) <= 1e-12
    assert abs(fpr_at_95_tpr(s, y) - fpr95_enum(s, y)) <= 1e-12
    assert abs(detection_error(s, y) - detection_error_enum(s, y)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=4, max_size=50), st.integers(0, 1000))
def test_auroc_symmetry_and_monotone_invariance(scores, seed):
    s = np.round(np.array(scores), 3)
    y = np.random.default_rng(seed).uniform(size=len(s)) < 0.5
    if y.all() or not y.any():
        return
    assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)
    assert auroc(s, y) + auroc(s, ~y) == pytest.approx(1.0, abs=1e-12)
    assert auroc(-s, ~y) == pytest.approx(auroc(s, y), abs=1e-12)
    # strictly increasing, and scores 1e-3 apart stay distinct in float64
    assert auroc(np.exp(s / 50.0) + s ** 3, y) == auroc(s, y)
    r = evaluate(s, y)
    assert all(0.0 <= v <= 1.0 for v in r.values())
    assert r.detection_error <= 0.525


def test_scored_set_validation():
    with pytest.raises(ValueError):
        ScoredSet([0.1, np.nan], [True, False])
    with pytest.raises(ValueError):
        ScoredSet([0.1], [True, False])
    assert evaluate(ScoredSet([0.1, 0.9], [False, True])).auroc == 1.0


# ---------------------------------------------------------------------------
# balanced evaluation

def balanced_set(rng, n=20):
    s = np.r_[rng.normal(size=2 * n), rng.normal(size=2 * n) + 1]
    y = labels(2 * n, 2 * n)
    cls = np.r_[np.zeros(n), np.ones(n), np.zeros(n), np.ones(n)].astype(int)
    return ScoredSet(s, y, cls)


def test_balanced_eval_already_balanced(rng):
    s = balanced_set(rng)
    r = balanced_eval(s, repeats=1)
    assert r.values() == evaluate(s).values() and r.sd == (0.0,) * 5


def test_balanced_eval_duplicated_entries(rng):
    s = balanced_set(rng)
    dup = s.subset(np.r_[np.arange(len(s)), np.arange(len(s))])
    r = balanced_eval(dup, repeats=3)
    assert np.allclose(r.values(), evaluate(s).values(), atol=1e-12)
    assert all(v >= 0 for v in r.sd)


def test_balanced_eval_exhaustive_small_set():
    # strata: (0, ID) has 3 entries, the others 2; every repeat is one of the
    # three possible 2-subsets of the large stratum
    s = ScoredSet([0.1, 0.5, 0.3, 0.2, 0.9, 0.4, 0.8, 0.7, 0.6],
                  [False] * 5 + [True] * 4, [0, 0, 0, 1, 1, 0, 0, 1, 1])
    big = [0, 1, 2]
    rest = [3, 4, 5, 6, 7, 8]
    possible = [evaluate(s.subset(np.array(sorted(list(c) + rest)))).auroc
                for c in itertools.combinations(big, 2)]
    for seed in range(5):
        r = balanced_eval(s, repeats=1, seed=seed)
        assert min(abs(r.auroc - p) for p in possible) < 1e-12
    many = balanced_eval(s, repeats=400, seed=1)
    assert many.auroc == pytest.approx(np.mean(possible), abs=0.03)
    assert r.n_id == 4 and r.n_ood == 4


def test_balanced_eval_deterministic_and_errors(rng):
    s = ScoredSet(rng.normal(size=50), rng.uniform(size=50) < 0.3, rng.integers(0, 3, 50))
    assert balanced_eval(s, 5, seed=3) == balanced_eval(s, 5, seed=3)
    with pytest.raises(EmptyStratum):
        balanced_eval(ScoredSet([0.1, 0.2], [False, False]))


def test_table_and_csv(rng):
    s = balanced_set(rng)
    rows = {"flow": balanced_eval(s, 2), "max_softmax": evaluate(s)}
    table = metrics.format_table(rows)
    assert "AUROC" in table and "FPR@95TPR" in table and "±" in table
    csv = metrics.report_csv(rows).splitlines()
    assert csv[0].startswith("method,auroc,auroc_sd") and len(csv) == 3


# ---------------------------------------------------------------------------
# sweep

def test_interpolated_ap_examples():
    assert interpolated_ap([True, True], 2) == 1.0
    assert interpolated_ap([], 3) == 0.0
    assert math.isnan(interpolated_ap([True], 0))
    assert interpolated_ap([True, False], 2) == pytest.approx(0.5)
    assert interpolated_ap([True, True], 2, n_points=11) == 1.0


def test_sweep_recount(rng):
    dets, gt, plain = sweep_fixture(rng)
    thresholds = np.linspace(-0.05, 1.05, 20)
    rows = ood_threshold_sweep(dets, gt, thresholds, CLASSES)
    for t, row in zip(thresholds, rows):
        m_ap, n_fp, n_removed, recall = sweep_recount(plain, gt, t, CLASSES, metrics.DEFAULT_MATCH_IOU)
        assert (row.n_fp, row.n_removed) == (n_fp, n_removed)
        assert row.mAP == pytest.approx(m_ap, abs=1e-12)
        assert row.ood_recall == pytest.approx(recall, abs=1e-12)
    removed = [r.n_removed for r in rows]
    assert removed == sorted(removed, reverse=True)
    rec = [r.ood_recall for r in rows]
    assert rec == sorted(rec, reverse=True)


def test_sweep_extremes(rng):
    dets, gt, _ = sweep_fixture(rng)
    lo, hi = ood_threshold_sweep(dets, gt, [-math.inf, math.inf], CLASSES)
    assert lo.n_removed == len(dets) and lo.mAP == 0.0 and lo.n_fp == 0
    assert lo.ood_recall == 1.0
    assert hi.n_removed == 0 and hi.ood_recall == 0.0
    base = ood_threshold_sweep(dets, gt, [2.0], CLASSES)[0]
    assert (hi.mAP, hi.n_fp) == (base.mAP, base.n_fp)
    with pytest.raises(EmptyThresholds):
        ood_threshold_sweep(dets, gt, [], CLASSES)


def test_sweep_csv(rng):
    dets, gt, _ = sweep_fixture(rng)
    text = metrics.sweep_csv(ood_threshold_sweep(dets, gt, [0.5, 1.0], CLASSES))
    assert text.splitlines()[0] == "threshold,mAP,n_fp,n_removed,ood_recall"
    assert len(text.splitlines()) == 3
