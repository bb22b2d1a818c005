import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecg_aging import evaluation as ev


# ---------------------------------------------------------------- AUC

def test_perfect_inverted_random():
    y = np.r_[np.zeros(50), np.ones(50)].astype(bool)
    s = np.arange(100.0)
    assert ev.binary_auc(s, y) == 1.0
    assert ev.binary_auc(-s, y) == 0.0
    rng = np.random.default_rng(0)
    aucs = [ev.binary_auc(rng.random(2000), rng.random(2000) < 0.5) for _ in range(20)]
    assert abs(np.mean(aucs) - 0.5) < 0.05


def test_ties_midrank():
    assert ev.binary_auc([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5
    assert math.isnan(ev.binary_auc([1, 2], [1, 1]))


def test_against_sklearn():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(1)
    for _ in range(20):
        y = rng.random(60) < 0.3
        s = np.round(rng.normal(size=60) + y, 1)     # rounding forces ties
        assert ev.binary_auc(s, y) == pytest.approx(metrics.roc_auc_score(y, s), abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_macro_auc_monotone_invariant(seed):
    rng = np.random.default_rng(seed)
    labels = np.r_[np.arange(4), rng.integers(0, 4, 36)]
    scores = rng.random((40, 4))
    a = ev.macro_auc(scores, labels)
    b = ev.macro_auc(np.exp(3 * scores) + 2, labels)
    np.testing.assert_allclose(a.per_class, b.per_class, rtol=0, atol=1e-15)


def test_macro_skips_missing_class():
    s = np.random.default_rng(0).random((10, 3))
    y = np.array([0, 1] * 5)
    with pytest.warns(RuntimeWarning, match="2"):
        r = ev.macro_auc(s, y)
    assert math.isnan(r.per_class[2]) and r.available.tolist() == [0, 1]
    assert math.isnan(ev.macro_auc(s, y, require=[2], warn=False).macro)
    with pytest.raises(ValueError):
        ev.macro_auc(s, np.zeros(10, int), n_classes=1)


# ---------------------------------------------------------------- splits

def _split(n_per, seed=0, n_groups=15):
    ids = [f"r{g:02d}_{i:03d}" for g in range(n_groups) for i in range(n_per)]
    groups = [g for g in range(n_groups) for _ in range(n_per)]
    return ids, groups, ev.stratified_split(ids, groups, seed=seed)


@pytest.mark.parametrize("n, want", [(10, (6, 2, 2)), (3, (1, 1, 1)), (40, (24, 8, 8)),
                                     (7, (4, 2, 1))])
def test_split_counts(n, want):
    _, groups, out = _split(n, n_groups=2)
    for g in range(2):
        c = Counter(v for k, v in out.items() if k.startswith(f"r{g:02d}"))
        assert (c["train"], c["valid"], c["test"]) == want


@given(st.integers(3, 60), st.integers(0, 100))
@settings(max_examples=30)
def test_split_within_one_subject(n, seed):
    _, _, out = _split(n, seed=seed, n_groups=2)
    c = Counter(out.values())
    for name, ratio in zip(ev.SPLITS, (0.6, 0.2, 0.2)):
        assert abs(c[name] / 2 - ratio * n) <= 1


def test_split_too_small():
    with pytest.raises(ValueError, match="group 1"):
        ev.stratified_split(["a", "b", "c", "d", "e"], [0, 0, 0, 1, 1])


def test_split_order_invariant_and_deterministic():
    ids, groups, out = _split(10)
    rng = np.random.default_rng(3)
    perm = rng.permutation(len(ids))
    again = ev.stratified_split([ids[i] for i in perm], [groups[i] for i in perm], seed=0)
    assert again == out
    assert ev.stratified_split(ids, groups, seed=1) != out


def test_split_errors():
    with pytest.raises(ValueError, match="unique"):
        ev.stratified_split(["a", "a", "b"], [0, 0, 0])
    with pytest.raises(ValueError):
        ev.stratified_split(["a"], [0, 1])


# ---------------------------------------------------------------- consolidation

def test_consolidation():
    assert len(ev.DEFAULT_CONSOLIDATION) == 15
    s = np.eye(15)
    labels = np.arange(15)
    assert ev.consolidate_accuracy(s, labels) == 1.0
    # mass split inside the consolidated class still counts as correct
    p = np.zeros((1, 15))
    p[0, [0, 1, 2, 3]] = 0.2
    p[0, 14] = 0.2
    assert ev.consolidate_accuracy(p, [1]) == 1.0
    assert ev.accuracy(p, [1]) == 0.0
    np.testing.assert_allclose(ev.consolidate_probs(p, ev.DEFAULT_CONSOLIDATION).sum(1), 1.0)
    with pytest.raises(ValueError):
        ev.consolidate_probs(p, [0] * 14)
    with pytest.raises(ValueError):
        ev.consolidate_probs(p, [0] * 14 + [2])


# ---------------------------------------------------------------- bootstrap

def _scores(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = np.r_[np.arange(3), rng.integers(0, 3, n - 3)]
    s = rng.random((n, 3)) + 0.8 * np.eye(3)[y]
    return s, y


def test_bootstrap_constant_metric():
    s, y = _scores()
    lo, hi, vals = ev.bootstrap_ci(lambda a, b: 0.42, s, y, n=100)
    assert lo == hi == 0.42 and np.all(vals == 0.42)


def test_bootstrap_deterministic_and_ordered():
    s, y = _scores()
    fn = lambda a, b: ev.macro_auc(a, b, warn=False).macro  # noqa: E731
    a = ev.bootstrap_ci(fn, s, y, n=200, seed=5)
    b = ev.bootstrap_ci(fn, s, y, n=200, seed=5)
    c = ev.bootstrap_ci(fn, s, y, n=200, seed=6)
    assert a[:2] == b[:2] and np.array_equal(a[2], b[2])
    assert a[:2] != c[:2]
    point = fn(s, y)
    assert a[0] <= point <= a[1]


def test_bootstrap_narrows_with_more_data():
    fn = lambda a, b: ev.macro_auc(a, b, warn=False).macro  # noqa: E731
    widths = []
    for n in (30, 600):
        s, y = _scores(n, seed=2)
        lo, hi, _ = ev.bootstrap_ci(fn, s, y, n=300, seed=0)
        widths.append(hi - lo)
    assert widths[1] < widths[0]


def test_bootstrap_minimum_and_redraw_limit():
    s, y = _scores()
    with pytest.raises(ValueError, match="100"):
        ev.bootstrap_ci(lambda a, b: 0.0, s, y, n=50)
    with pytest.raises(RuntimeError):
        ev.bootstrap_ci(lambda a, b: math.nan, s, y, n=100, max_retries=2)


def test_format_ci():
    assert ev.format_ci(0.7712, 0.7249, 0.8011) == "0.77 (0.72, 0.80)"


def test_evaluate_scores_report():
    s, y = _scores(90)
    s = np.hstack([s, np.zeros((90, 12))])
    with pytest.warns(RuntimeWarning, match="undefined"):
        r = ev.evaluate_scores(s, y, n_bootstrap=100, mapping=[0, 1, 2] + [2] * 12)
    d = r.to_dict()
    assert d["macro_auc"]["lo"] <= d["macro_auc"]["point"] <= d["macro_auc"]["hi"]
    assert d["per_class_auc"][5] is None
    assert np.asarray(d["confusion"]).sum() == 90
    assert "consolidated_accuracy" in d["extra"]
    assert r.table().startswith("macro-AUC")
