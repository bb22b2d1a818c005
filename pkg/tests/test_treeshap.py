import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecg_aging import gbdt, treeshap


# ---------------------------------------------------------------- oracle

def random_tree(rng, n_features=5, max_depth=3):
    """Random full-ish binary tree with positive covers that add up."""
    feat, thr, left, right, mleft, value, cover = [], [], [], [], [], [], []

    def node(depth):
        i = len(feat)
        for a in (feat, thr, left, right, mleft, value, cover):
            a.append(None)
        if depth == max_depth or (depth > 0 and rng.random() < 0.25):
            feat[i], thr[i], left[i], right[i], mleft[i] = -1, 0.0, -1, -1, False
            value[i] = float(rng.normal())
            cover[i] = float(rng.uniform(0.5, 10))
            return i
        feat[i] = int(rng.integers(n_features))
        thr[i] = float(rng.normal())
        mleft[i] = bool(rng.random() < 0.5)
        value[i] = 0.0
        left[i] = node(depth + 1)
        right[i] = node(depth + 1)
        cover[i] = cover[left[i]] + cover[right[i]]
        return i

    node(0)
    return gbdt.Tree(np.array(feat), np.array(thr), np.array(left), np.array(right),
                     np.array(mleft), np.array(value), np.array(cover))


def _cond_exp(tree, x, subset, j=0):
    if tree.feature[j] < 0:
        return tree.value[j]
    f = tree.feature[j]
    if f in subset:
        v = x[f]
        go_left = tree.missing_left[j] if math.isnan(v) else v < tree.threshold[j]
        return _cond_exp(tree, x, subset, tree.left[j] if go_left else tree.right[j])
    l, r = tree.left[j], tree.right[j]
    return (tree.cover[l] * _cond_exp(tree, x, subset, l)
            + tree.cover[r] * _cond_exp(tree, x, subset, r)) / tree.cover[j]


def brute_force_shapley(tree, x, n_features):
    """Enumerate all 2^M subsets of the features."""
    phi = np.zeros(n_features)
    feats = range(n_features)
    for i in feats:
        others = [f for f in feats if f != i]
        for size in range(len(others) + 1):
            w = math.factorial(size) * math.factorial(n_features - size - 1) \
                / math.factorial(n_features)
            for S in itertools.combinations(others, size):
                S = set(S)
                phi[i] += w * (_cond_exp(tree, x, S | {i}) - _cond_exp(tree, x, S))
    return phi


def _ensemble(trees, n_features, base=0.3):
    names = tuple(f"f{i}" for i in range(n_features))
    return gbdt.TreeEnsemble(1, np.array([base]), 0.1, names, [[t] for t in trees])


def _query(rng, n_features, p_missing=0.15):
    x = rng.normal(size=n_features)
    x[rng.random(n_features) < p_missing] = np.nan
    return x


# ---------------------------------------------------------------- tests

def test_brute_force_oracle_50_trees():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        tree = random_tree(rng)
        for _ in range(4):
            x = _query(rng, 5)
            ref = brute_force_shapley(tree, x, 5)
            rec = np.zeros(5)
            treeshap.tree_shap_recursive(tree, x, rec)
            bat = np.zeros((1, 5))
            treeshap.tree_shap_batch(tree, x[None, :], bat)
            worst = max(worst, np.abs(rec - ref).max(), np.abs(bat[0] - ref).max())
    assert worst < 1e-9


def test_oracle_matches_module_conditional_expectation():
    rng = np.random.default_rng(5)
    for _ in range(20):
        tree = random_tree(rng)
        x = _query(rng, 5)
        S = set(np.flatnonzero(rng.random(5) < 0.5).tolist())
        assert treeshap.conditional_expectation(tree, x, S) == pytest.approx(
            _cond_exp(tree, x, S), abs=1e-12)


def _fitted(seed=0, n=300, F=8, n_classes=4, rounds=15):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, F))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = (np.nan_to_num(X[:, 0]) + np.nan_to_num(X[:, 2]) > 0).astype(int) \
        + 2 * (np.nan_to_num(X[:, 1]) > 0.3)
    cfg = gbdt.TrainConfig(n_rounds=rounds, learning_rate=0.3, max_depth=4, max_leaves=8)
    return gbdt.fit(X, y, cfg, n_classes=n_classes), X


def test_local_accuracy_1000_instances():
    ens, X = _fitted()
    rng = np.random.default_rng(1)
    Q = rng.normal(size=(1000, X.shape[1])) * 1.5
    Q[rng.random(Q.shape) < 0.1] = np.nan
    margin = ens.predict_margin(Q)
    for k in range(ens.n_classes):
        phi, base = treeshap.shap_values(ens, Q, k)
        assert np.abs(base + phi.sum(1) - margin[:, k]).max() < 1e-9


def test_recursive_equals_batch_on_fitted():
    ens, X = _fitted(seed=3)
    phi, base = treeshap.shap_values(ens, X[:40], 2)
    for i in range(40):
        e = treeshap.explain_instance(ens, X[i], 2)
        assert e.base_value == pytest.approx(base, abs=1e-12)
        np.testing.assert_allclose(e.phi, phi[i], atol=1e-12)
        assert abs(e.base_value + e.phi.sum() - e.model_output) < 1e-9


def test_zero_round():
    ens = gbdt.TreeEnsemble(3, np.array([0.1, 0.2, 0.3]), 0.1, ("a", "b"))
    e = treeshap.explain_instance(ens, [1.0, 2.0], 1)
    assert np.all(e.phi == 0) and e.base_value == 0.2 and e.model_output == 0.2


def test_depth_one_hand_example():
    # root splits feature 1 at 0; left leaf 2.0 (cover 3), right leaf -1.0 (cover 1)
    tree = gbdt.Tree(np.array([1, -1, -1]), np.array([0.0, 0, 0]), np.array([1, -1, -1]),
                     np.array([2, -1, -1]), np.array([False] * 3), np.array([0, 2.0, -1.0]),
                     np.array([4.0, 3.0, 1.0]))
    ens = _ensemble([tree], 3, base=0.0)
    e = treeshap.explain_instance(ens, [5.0, -1.0, 7.0], 0)
    expected = 2.0 - (3 * 2.0 + 1 * -1.0) / 4
    assert e.phi[1] == pytest.approx(expected, abs=1e-15)
    assert e.phi[0] == 0 and e.phi[2] == 0
    assert e.base_value == pytest.approx(1.25)


def test_class_out_of_range():
    ens, X = _fitted()
    with pytest.raises(ValueError):
        treeshap.explain_instance(ens, X[0], 4)
    with pytest.raises(ValueError):
        treeshap.shap_values(ens, X[:2], -1)


def test_dummy_feature_exact_zero():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 4))
    X[:, 2] = 1.0                      # constant column: never split on
    y = (X[:, 0] > 0).astype(int) + (X[:, 1] > 0)
    ens = gbdt.fit(X, y, gbdt.TrainConfig(n_rounds=10, learning_rate=0.3), n_classes=3)
    X = rng.normal(size=(100, 4))
    used = set()
    for trees in ens.rounds:
        for t in trees:
            used |= t.used_features()
    unused = [f for f in range(X.shape[1]) if f not in used]
    assert unused
    for k in range(ens.n_classes):
        phi, _ = treeshap.shap_values(ens, X, k)
        assert np.all(phi[:, unused] == 0.0)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 10), st.floats(-5, 5))
@settings(max_examples=50)
def test_symmetry(xa, xb, cov, val):
    # f = v * [x0 < 0 and x1 < 0]: x0 and x1 are interchangeable
    t = gbdt.Tree(np.array([0, 1, -1, -1, 1, -1, -1]),
                  np.zeros(7), np.array([1, 2, -1, -1, 5, -1, -1]),
                  np.array([4, 3, -1, -1, 6, -1, -1]), np.zeros(7, bool),
                  np.array([0, 0, val, 0, 0, 0, 0.0]),
                  np.array([4 * cov, 2 * cov, cov, cov, 2 * cov, cov, cov]))
    ens = _ensemble([t], 2)
    p = treeshap.explain_instance(ens, [xa, xb], 0).phi
    q = treeshap.explain_instance(ens, [xb, xa], 0).phi
    assert abs(p[0] - q[1]) < 1e-12 and abs(p[1] - q[0]) < 1e-12
    if xa == xb:
        assert abs(p[0] - p[1]) < 1e-12


def test_summary_single_instance():
    ens, X = _fitted()
    s = treeshap.summarize_class(ens, X[:1], 1, k=5)
    phi = np.abs(treeshap.explain_instance(ens, X[0], 1).phi)
    order = sorted(range(phi.size), key=lambda i: (-phi[i], i))
    assert [n for n, _ in s.ranking] == [ens.feature_names[i] for i in order]
    assert len(s.top_features) == 5 and s.phi.shape == (1, 5)


def test_summary_ranking_and_clamp():
    ens, X = _fitted()
    s = treeshap.summarize_class(ens, X, 0, k=50)
    vals = [v for _, v in s.ranking]
    assert vals == sorted(vals, reverse=True)
    assert len(s.top_features) == X.shape[1]
    assert s.values.shape == (X.shape[0], X.shape[1])
    with pytest.raises(ValueError):
        treeshap.summarize_class(ens, X[:0], 0)


def test_summary_json():
    ens, X = _fitted()
    s = [treeshap.summarize_class(ens, X, k, k=3) for k in range(ens.n_classes)]
    doc = json.loads(treeshap.summaries_to_json(s, extra={"split": "train"}))
    assert doc["method"] == "tree_path_dependent" and doc["split"] == "train"
    assert len(doc["classes"]) == 4
    assert all(v is None or isinstance(v, float) for v in doc["classes"][0]["values"][0])


def test_expected_value_is_cover_mean():
    rng = np.random.default_rng(0)
    t = random_tree(rng)
    assert treeshap.expected_value(t) == pytest.approx(_cond_exp(t, np.zeros(5), set()))
