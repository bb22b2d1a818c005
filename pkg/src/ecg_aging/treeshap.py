"""Exact path-dependent TreeSHAP for ``gbdt.TreeEnsemble`` models.

Node covers (training hessian sums) act as the background distribution, so
no reference data set is needed. ``explain_instance`` runs the recursive
polynomial-time algorithm per tree; ``shap_values`` computes the same numbers
for many rows at once by walking each root-to-leaf path and grouping rows by
which path edges they follow.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

METHOD = "tree_path_dependent"


@dataclass
class ShapExplanation:
    class_id: int
    phi: np.ndarray
    base_value: float
    model_output: float
    feature_names: tuple = ()


@dataclass
class ShapSummary:
    class_id: int
    ranking: list              # [(feature_name, mean_abs_phi)] descending
    top_features: list         # names of the top-k
    phi: np.ndarray            # (n_samples, k)
    values: np.ndarray         # (n_samples, k) feature values
    base_value: float = 0.0
    method: str = METHOD
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        def clean(a):
            return [[None if not math.isfinite(v) else float(v) for v in row] for row in a]
        return {
            "class_id": self.class_id,
            "method": self.method,
            "base_value": self.base_value,
            "ranking": [{"feature": n, "mean_abs_phi": float(v)} for n, v in self.ranking],
            "top_features": list(self.top_features),
            "phi": clean(self.phi),
            "values": clean(self.values),
            **self.meta,
        }


# ---------------------------------------------------------------- single instance

class _PathElem:
    __slots__ = ("d", "z", "o", "w")

    def __init__(self, d, z, o, w):
        self.d, self.z, self.o, self.w = d, z, o, w

    def copy(self):
        return _PathElem(self.d, self.z, self.o, self.w)


def _extend(m, pz, po, pi):
    m = [e.copy() for e in m]
    l = len(m)
    m.append(_PathElem(pi, pz, po, 1.0 if l == 0 else 0.0))
    for i in range(l - 1, -1, -1):
        m[i + 1].w += po * m[i].w * (i + 1) / (l + 1)
        m[i].w = pz * m[i].w * (l - i) / (l + 1)
    return m


def _unwind(m, i):
    m = [e.copy() for e in m]
    l = len(m) - 1
    n = m[l].w
    zi, oi = m[i].z, m[i].o
    for j in range(l - 1, -1, -1):
        if oi != 0:
            t = m[j].w
            m[j].w = n * (l + 1) / ((j + 1) * oi)
            n = t - m[j].w * zi * (l - j) / (l + 1)
        else:
            m[j].w = m[j].w * (l + 1) / (zi * (l - j))
    for j in range(i, l):
        m[j].d, m[j].z, m[j].o = m[j + 1].d, m[j + 1].z, m[j + 1].o
    return m[:l]


def _goes_left(tree, node, x):
    v = x[tree.feature[node]]
    if math.isnan(v):
        return bool(tree.missing_left[node])
    return v < tree.threshold[node]


def tree_shap_recursive(tree, x, phi):
    """Add one tree's SHAP values for row ``x`` into ``phi`` (in place)."""

    def recurse(j, m, pz, po, pi):
        m = _extend(m, pz, po, pi)
        if tree.feature[j] < 0:
            v = tree.value[j]
            for i in range(1, len(m)):
                w = sum(e.w for e in _unwind(m, i))
                phi[m[i].d] += w * (m[i].o - m[i].z) * v
            return
        left, right = tree.left[j], tree.right[j]
        hot, cold = (left, right) if _goes_left(tree, j, x) else (right, left)
        iz = io = 1.0
        f = tree.feature[j]
        k = next((i for i in range(1, len(m)) if m[i].d == f), None)
        if k is not None:
            iz, io = m[k].z, m[k].o
            m = _unwind(m, k)
        cj = tree.cover[j]
        recurse(hot, m, iz * tree.cover[hot] / cj, io, f)
        recurse(cold, m, iz * tree.cover[cold] / cj, 0.0, f)

    recurse(0, [], 1.0, 1.0, -1)


def expected_value(tree):
    """Cover-weighted mean leaf value."""
    leaves = tree.feature < 0
    return float(np.sum(tree.value[leaves] * tree.cover[leaves]) / tree.cover[0])


def explain_instance(ensemble, x, class_id) -> ShapExplanation:
    if not 0 <= class_id < ensemble.n_classes:
        raise ValueError(f"class_id {class_id} out of range 0..{ensemble.n_classes - 1}")
    if hasattr(x, "values") and isinstance(x.values, dict):
        x = [x.values[n] for n in ensemble.feature_names]
    x = np.asarray(x, dtype=float)
    if x.shape != (ensemble.n_features,):
        raise ValueError("feature vector does not match the model")
    phi = np.zeros(ensemble.n_features)
    base = float(ensemble.base_score[class_id])
    out = base
    for tree in ensemble.trees_for_class(class_id):
        tree_shap_recursive(tree, x, phi)
        base += expected_value(tree)
        out += float(tree.predict(x[None, :])[0])
    return ShapExplanation(class_id, phi, base, out, ensemble.feature_names)


# ---------------------------------------------------------------- batch

def _leaf_paths(tree):
    """For every leaf: value, and the (node, went_left) edges from the root."""
    out = []
    stack = [(0, [])]
    while stack:
        j, path = stack.pop()
        if tree.feature[j] < 0:
            out.append((float(tree.value[j]), path))
            continue
        stack.append((tree.right[j], path + [(j, False)]))
        stack.append((tree.left[j], path + [(j, True)]))
    return out


def _shapley_weights(d):
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d)
                     for s in range(d)])


def _leaf_contrib(z, o, v):
    """SHAP contribution of one leaf for one hot/cold pattern ``o``."""
    d = z.size
    w = _shapley_weights(d)
    out = np.empty(d)
    for i in range(d):
        poly = np.zeros(d)
        poly[0] = 1.0
        deg = 0
        for j in range(d):
            if j == i:
                continue
            # multiply by (z_j + o_j t)
            nxt = poly * z[j]
            nxt[1:deg + 2] += poly[:deg + 1] * o[j]
            poly = nxt
            deg += 1
        out[i] = v * (o[i] - z[i]) * float(w @ poly[:d])
    return out


def tree_shap_batch(tree, X, phi):
    """Add one tree's SHAP values for every row of ``X`` into ``phi`` (n, F)."""
    n = X.shape[0]
    for v, path in _leaf_paths(tree):
        if not path or v == 0.0:
            continue
        feats, zs, os_ = [], [], []
        for j, went_left in path:
            f = int(tree.feature[j])
            col = X[:, f]
            left = np.where(np.isnan(col), tree.missing_left[j], col < tree.threshold[j])
            follows = left if went_left else ~left
            child = tree.left[j] if went_left else tree.right[j]
            ratio = tree.cover[child] / tree.cover[j]
            if f in feats:
                k = feats.index(f)
                zs[k] *= ratio
                os_[k] &= follows
            else:
                feats.append(f)
                zs.append(ratio)
                os_.append(follows.copy())
        z = np.asarray(zs)
        O = np.column_stack(os_)
        codes = O @ (1 << np.arange(O.shape[1]))
        uniq, first, inv = np.unique(codes, return_index=True, return_inverse=True)
        table = np.stack([_leaf_contrib(z, O[i].astype(float), v) for i in first])
        phi[:, feats] += table[inv.reshape(n)]


def shap_values(ensemble, X, class_id):
    """``(phi, base_value)`` for every row of ``X`` towards ``class_id``."""
    if not 0 <= class_id < ensemble.n_classes:
        raise ValueError(f"class_id {class_id} out of range 0..{ensemble.n_classes - 1}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    phi = np.zeros((X.shape[0], ensemble.n_features))
    base = float(ensemble.base_score[class_id])
    for tree in ensemble.trees_for_class(class_id):
        tree_shap_batch(tree, X, phi)
        base += expected_value(tree)
    return phi, base


# ---------------------------------------------------------------- oracle helpers

def conditional_expectation(tree, x, subset):
    """E[f(x) | x_S] under the cover distribution, by direct recursion."""
    subset = set(subset)

    def rec(j):
        if tree.feature[j] < 0:
            return float(tree.value[j])
        if tree.feature[j] in subset:
            return rec(tree.left[j] if _goes_left(tree, j, x) else tree.right[j])
        cl, cr = tree.cover[tree.left[j]], tree.cover[tree.right[j]]
        return (cl * rec(tree.left[j]) + cr * rec(tree.right[j])) / tree.cover[j]

    return rec(0)


# ---------------------------------------------------------------- summaries

def summarize_class(ensemble, X, class_id, k=10):
    """Rank features by mean |SHAP| over the rows of ``X`` for one class."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty table")
    phi, base = shap_values(ensemble, X, class_id)
    mean_abs = np.abs(phi).mean(axis=0)
    order = sorted(range(ensemble.n_features), key=lambda i: (-mean_abs[i], i))
    top = order[:min(k, ensemble.n_features)]
    names = ensemble.feature_names
    return ShapSummary(
        class_id=class_id,
        ranking=[(names[i], float(mean_abs[i])) for i in order],
        top_features=[names[i] for i in top],
        phi=phi[:, top],
        values=X[:, top],
        base_value=base,
    )


def summaries_to_json(summaries, extra=None):
    doc = {"method": METHOD, "classes": [s.to_dict() for s in summaries]}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True)
