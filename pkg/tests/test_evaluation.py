import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.special import gammaln

from spectstage.evaluation import (
    FoldMetrics,
    MetricsReport,
    StratificationError,
    bonferroni_onesided_ttest,
    classification_metrics,
    emit_report,
    report_csv,
    significance_table,
    split_validation,
    stratified_kfold,
    student_t_sf,
)


# --------------------------------------------------------------------------- oracles


def metrics_oracle(labels, preds, c):
    """Counts every cell one pair at a time; F1 from its definition."""
    cm = [[0] * c for _ in range(c)]
    for y, p in zip(labels, preds):
        cm[y][p] += 1
    f1 = []
    for k in range(c):
        tp = cm[k][k]
        fp = sum(cm[j][k] for j in range(c)) - tp
        fn = sum(cm[k]) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    acc = sum(cm[k][k] for k in range(c)) / len(labels)
    return acc, f1, sum(f1) / c, cm


def t_sf_quadrature(t, df):
    """Upper tail of Student's t by numerically integrating its density."""
    logc = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * math.log(df * math.pi)
    pdf = lambda x: math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))  # noqa: E731
    if t >= 0:
        return integrate.quad(pdf, t, math.inf, epsabs=1e-13, epsrel=1e-12)[0]
    return 0.5 + integrate.quad(pdf, t, 0, epsabs=1e-13, epsrel=1e-12)[0]


# --------------------------------------------------------------------------- folds


def test_kfold_exact_divisibility():
    labels = np.array([0] * 10 + [1] * 5)
    plan = stratified_kfold(labels, 5, seed=3)
    for f in range(5):
        idx = plan.test_indices(f)
        assert np.bincount(labels[idx], minlength=2).tolist() == [2, 1]


def test_kfold_seven_members():
    plan = stratified_kfold(np.zeros(7, int), 5, seed=0)
    sizes = sorted(np.bincount(plan.folds, minlength=5).tolist())
    assert sizes == [1, 1, 1, 2, 2]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(5, 60), min_size=2, max_size=7), st.integers(2, 6), st.integers(0, 2**31))
def test_kfold_partition_and_balance(counts, k, seed):
    if min(counts) < k:
        return
    labels = np.repeat(np.arange(len(counts)), counts)
    plan = stratified_kfold(labels, k, seed)
    assert set(plan.folds.tolist()) == set(range(k))
    seen = np.concatenate([plan.test_indices(f) for f in range(k)])
    assert sorted(seen.tolist()) == list(range(len(labels)))
    for f in range(k):
        per_class = np.bincount(labels[plan.test_indices(f)], minlength=len(counts))
        assert np.all(np.abs(per_class - np.asarray(counts) / k) <= 1)
        train = plan.train_indices(f)
        assert not set(train.tolist()) & set(plan.test_indices(f).tolist())


def test_kfold_eda_counts_within_one():
    counts = np.array([6, 22, 27, 53, 87, 7])
    labels = np.repeat(np.arange(6), counts)
    plan = stratified_kfold(labels, 5, 0)
    for f in range(5):
        per_class = np.bincount(labels[plan.test_indices(f)], minlength=6)
        assert np.all(np.abs(per_class - counts / 5) <= 1)


def test_kfold_deterministic_and_seed_dependent():
    labels = np.repeat(np.arange(3), 12)
    a, b = stratified_kfold(labels, 5, 1), stratified_kfold(labels, 5, 1)
    assert np.array_equal(a.folds, b.folds)
    assert not np.array_equal(a.folds, stratified_kfold(labels, 5, 2).folds)
    ids = [f"p{i}" for i in range(36)]
    assert a.assignments(ids)["p0"] == a.folds[0]


def test_kfold_small_class_rejected():
    with pytest.raises(StratificationError):
        stratified_kfold([0] * 10 + [1] * 4, 5)


def test_validation_split_balanced():
    labels = np.repeat(np.arange(4), 25)
    train, val = split_validation(np.arange(100), labels, 0.2, seed=0)
    assert len(train) == 80 and len(val) == 20
    assert np.bincount(labels[val]).tolist() == [5, 5, 5, 5]
    assert not set(train) & set(val) and len(set(train) | set(val)) == 100


def test_validation_split_small_class_stays(caplog):
    labels = np.array([0] * 10 + [1] * 2)
    with caplog.at_level(logging.WARNING):
        train, val = split_validation(np.arange(12), labels, 0.2, seed=0)
    assert {10, 11} <= set(train.tolist())
    assert np.bincount(labels[val], minlength=2).tolist() == [2, 0]
    assert "only 2" in caplog.text


def test_validation_split_keeps_one_for_class_of_five():
    labels = np.array([0] * 5 + [1] * 40)
    _, val = split_validation(np.arange(45), labels, 0.2, seed=1)
    assert np.bincount(labels[val]).tolist() == [1, 8]


# --------------------------------------------------------------------------- metrics


def test_metrics_perfect_and_all_one_class():
    m = classification_metrics([0, 1, 2], [0, 1, 2], 3)
    assert m.accuracy == 1.0 and m.macro_f1 == 1.0
    m = classification_metrics([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert m.accuracy == 0.5
    assert m.per_class_f1.tolist() == pytest.approx([2 / 3, 0.0])
    assert m.macro_f1 == pytest.approx(1 / 3)


def test_metrics_match_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        n = int(rng.integers(1, 40))
        labels = rng.integers(0, c, n)
        preds = np.where(rng.random(n) < 0.5, labels, rng.integers(0, c, n))
        m = classification_metrics(labels, preds, c)
        acc, f1, macro, cm = metrics_oracle(labels.tolist(), preds.tolist(), c)
        assert m.accuracy == pytest.approx(acc, abs=1e-12)
        np.testing.assert_allclose(m.per_class_f1, f1, atol=1e-12)
        assert m.macro_f1 == pytest.approx(macro, abs=1e-12)
        assert m.confusion.tolist() == cm
        assert m.accuracy == pytest.approx(np.trace(m.confusion) / m.confusion.sum())


def test_metrics_relabeling_invariance():
    rng = np.random.default_rng(1)
    labels, preds = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    perm = np.array([2, 0, 3, 1])
    a = classification_metrics(labels, preds, 4)
    b = classification_metrics(perm[labels], perm[preds], 4)
    assert a.accuracy == b.accuracy and a.macro_f1 == pytest.approx(b.macro_f1)
    np.testing.assert_allclose(b.per_class_f1[perm], a.per_class_f1)


def test_report_std_unbiased():
    rep = MetricsReport("m", [FoldMetrics(a, np.zeros(2), 0.0, np.zeros((2, 2), int)) for a in (0.5, 0.7, 0.9)])
    assert rep.mean("accuracy") == pytest.approx(0.7)
    assert rep.std("accuracy") == pytest.approx(0.2)


# --------------------------------------------------------------------------- t-tests


def test_t_sf_matches_quadrature():
    rng = np.random.default_rng(2)
    for _ in range(40):
        t = float(rng.normal() * 3)
        df = float(rng.uniform(1.5, 30))
        assert student_t_sf(t, df) == pytest.approx(t_sf_quadrature(t, df), abs=1e-6)


def test_welch_test_matches_numeric_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = rng.normal(0.7, rng.uniform(0.01, 0.1), 5)
        b = rng.normal(0.65, rng.uniform(0.01, 0.1), 5)
        res = bonferroni_onesided_ttest(a, b, 1)
        va, vb = a.var(ddof=1) / 5, b.var(ddof=1) / 5
        t = (a.mean() - b.mean()) / math.sqrt(va + vb)
        df = (va + vb) ** 2 / (va**2 / 4 + vb**2 / 4)
        assert res.t == pytest.approx(t, rel=1e-12)
        assert res.df == pytest.approx(df, rel=1e-12)
        assert res.raw_p == pytest.approx(t_sf_quadrature(t, df), abs=1e-6)
        ref = stats.ttest_ind(a, b, equal_var=False, alternative="greater")
        assert res.raw_p == pytest.approx(ref.pvalue, abs=1e-9)


def test_identical_groups_half():
    scores = [0.61, 0.7, 0.66, 0.72, 0.58]
    res = bonferroni_onesided_ttest(scores, scores, 3)
    assert res.t == 0.0 and res.raw_p == 0.5 and not res.significant
    res = bonferroni_onesided_ttest([0.5] * 5, [0.5] * 5)
    assert res.raw_p == 0.5 and res.degenerate and not res.significant


def test_clear_separation_significant():
    rng = np.random.default_rng(4)
    best = 0.9 + rng.normal(0, 1e-3, 5)
    other = 0.1 + rng.normal(0, 1e-3, 5)
    for m in range(1, 21):
        res = bonferroni_onesided_ttest(best, other, m)
        assert res.adjusted_p < 1e-3 and res.significant


def test_bonferroni_adjustment():
    rng = np.random.default_rng(5)
    a, b = rng.normal(0.6, 0.05, 5), rng.normal(0.58, 0.05, 5)
    one = bonferroni_onesided_ttest(a, b, 1)
    assert one.adjusted_p == one.raw_p
    for m in (2, 5, 40):
        r = bonferroni_onesided_ttest(a, b, m)
        assert r.adjusted_p == min(1.0, m * r.raw_p)


def test_ttest_needs_two_scores():
    with pytest.raises(ValueError):
        bonferroni_onesided_ttest([0.5], [0.4, 0.3])


# --------------------------------------------------------------------------- reports


def _report(name, accs, f1s):
    return MetricsReport(name, [FoldMetrics(a, np.array([f, f]), f, np.eye(2, dtype=int)) for a, f in zip(accs, f1s)])


def test_report_csv_layout():
    reps = [
        _report("linear", [0.8, 0.7, 0.75, 0.9, 0.85], [0.7, 0.6, 0.65, 0.8, 0.75]),
        _report("attn1", [0.6, 0.65, 0.7, 0.55, 0.6], [0.5, 0.55, 0.6, 0.45, 0.5]),
    ]
    lines = report_csv(reps).strip().split("\n")
    assert lines[0] == "model,metric,mean,std,fold_0,fold_1,fold_2,fold_3,fold_4"
    assert len(lines) == 5
    assert lines[1].startswith("linear,accuracy,0.8000,0.0791,0.8000,0.7000")
    assert lines[4].startswith("attn1,macro_f1,0.5200,")


def test_emit_report_consistent_and_deterministic(tmp_path):
    reps = [
        _report("a", [0.8, 0.7, 0.75, 0.9, 0.85], [0.7, 0.6, 0.65, 0.8, 0.75]),
        _report("b", [0.6, 0.65, 0.7, 0.55, 0.6], [0.5, 0.55, 0.6, 0.45, 0.5]),
        _report("c", [0.6, 0.6, 0.6, 0.6, 0.6], [0.5, 0.5, 0.5, 0.5, 0.5]),
    ]
    paths = emit_report(reps, tmp_path / "r1" / "report")
    doc = json.loads(paths["json"].read_text())
    rows = [line.split(",") for line in paths["csv"].read_text().strip().split("\n")[1:]]
    for model_doc in doc["models"]:
        for metric, summary in model_doc["summary"].items():
            row = next(r for r in rows if r[0] == model_doc["model"] and r[1] == metric)
            assert float(row[2]) == pytest.approx(summary["mean"], abs=5e-5)
            assert float(row[3]) == pytest.approx(summary["std"], abs=5e-5)
    sig = paths["significance"].read_text().strip().split("\n")
    assert sig[0] == "comparison,t,raw_p,adjusted_p,significant"
    assert len(sig) == 1 + 2 * 2  # best vs two others, for both metrics
    again = emit_report(reps, tmp_path / "r2" / "report")
    for key in paths:
        assert paths[key].read_bytes() == again[key].read_bytes()


def test_significance_table_uses_best_model():
    reps = [_report("lo", [0.5] * 2 + [0.6] * 3, [0.5] * 5), _report("hi", [0.9, 0.8, 0.85, 0.9, 0.95], [0.8] * 5)]
    rows = significance_table(reps, "accuracy")
    assert [name for name, _ in rows] == ["hi>lo:accuracy"]
    assert rows[0][1].adjusted_p == rows[0][1].raw_p


def test_report_json_round_trip():
    rep = _report("x", [0.8, 0.6], [0.7, 0.5])
    back = MetricsReport.from_json(json.loads(json.dumps(rep.to_json())))
    assert back.values("accuracy").tolist() == [0.8, 0.6]
    assert np.array_equal(back.per_fold[0].confusion, rep.per_fold[0].confusion)
