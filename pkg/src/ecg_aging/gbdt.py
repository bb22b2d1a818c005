"""Multi-class gradient-boosted decision trees with a softmax objective.

Each boosting round fits one regression tree per class to the softmax
gradient/hessian pairs. Trees grow best-first (highest gain leaf first) under
``max_depth`` and ``max_leaves``, splits are exact (every distinct value is a
candidate) and each split learns which side missing values go to.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .evaluation import macro_auc

log = logging.getLogger(__name__)

MODEL_FORMAT = "ecg_aging.gbdt/1"


@dataclass(frozen=True)
class TrainConfig:
    max_depth: int = 10
    max_leaves: int = 10
    learning_rate: float = 0.008
    n_rounds: int = 200
    min_child_weight: float = 1.0
    lambda_l2: float = 1.0
    early_stopping_rounds: int | None = 50
    seed: int = 0


@dataclass
class Tree:
    """Flat array representation; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    missing_left: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self):
        return self.feature.size

    def is_leaf(self, i):
        return self.feature[i] < 0

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            f = self.feature[nd]
            v = X[idx, f]
            go_left = np.where(np.isnan(v), self.missing_left[nd], v < self.threshold[nd])
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "missing_left": [bool(b) for b in self.missing_left],
            "value": [float(v) for v in self.value],
            "cover": [float(c) for c in self.cover],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            feature=np.asarray(d["feature"], dtype=int),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=int),
            right=np.asarray(d["right"], dtype=int),
            missing_left=np.asarray(d["missing_left"], dtype=bool),
            value=np.asarray(d["value"], dtype=float),
            cover=np.asarray(d["cover"], dtype=float),
        )

    def used_features(self):
        return set(int(f) for f in self.feature if f >= 0)


@dataclass
class TreeEnsemble:
    n_classes: int
    base_score: np.ndarray
    learning_rate: float
    feature_names: tuple
    rounds: list = field(default_factory=list)  # rounds[r][k] -> Tree for class k
    config: TrainConfig | None = None
    history: list = field(default_factory=list)

    @property
    def n_features(self):
        return len(self.feature_names)

    def trees_for_class(self, k):
        return [r[k] for r in self.rounds]

    def predict_margin(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.tile(np.asarray(self.base_score, dtype=float), (X.shape[0], 1))
        for trees in self.rounds:
            for k, t in enumerate(trees):
                out[:, k] += t.predict(X)
        return out

    def predict_proba(self, X):
        return softmax(self.predict_margin(X))

    def truncated(self, n_rounds):
        return replace(self, rounds=list(self.rounds[:n_rounds]))

    # ----------------------------------------------------------- serialisation

    def to_json(self, extra=None) -> str:
        doc = {
            "format": MODEL_FORMAT,
            "n_classes": self.n_classes,
            "feature_names": list(self.feature_names),
            "base_score": [float(b) for b in self.base_score],
            "learning_rate": self.learning_rate,
            "config": asdict(self.config) if self.config else None,
            "rounds": [[t.to_dict() for t in trees] for trees in self.rounds],
        }
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} document")
        cfg = TrainConfig(**doc["config"]) if doc.get("config") else None
        return cls(
            n_classes=int(doc["n_classes"]),
            base_score=np.asarray(doc["base_score"], dtype=float),
            learning_rate=float(doc["learning_rate"]),
            feature_names=tuple(doc["feature_names"]),
            rounds=[[Tree.from_dict(t) for t in trees] for trees in doc["rounds"]],
            config=cfg,
        )


def softmax(z):
    z = np.asarray(z, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- imbalance

def rebalance_oversample(X, y, seed=0, n_classes=None):
    """Random oversampling: every class is topped up with replacement to the
    majority count; original rows are always kept. Output rows are shuffled."""
    X = np.asarray(X)
    y = np.asarray(y, dtype=int)
    classes = np.arange(n_classes) if n_classes is not None else np.unique(y)
    counts = np.array([np.count_nonzero(y == c) for c in classes])
    if np.any(counts == 0):
        empty = classes[counts == 0].tolist()
        raise ValueError(f"cannot oversample empty class(es) {empty}")
    rng = np.random.default_rng(seed)
    target = counts.max()
    idx = [np.arange(y.size)]
    for c, n in zip(classes, counts):
        if n < target:
            members = np.flatnonzero(y == c)
            idx.append(rng.choice(members, size=target - n, replace=True))
    idx = np.concatenate(idx)
    idx = idx[rng.permutation(idx.size)]
    return X[idx], y[idx]


def inverse_frequency_weights(y, n_classes):
    counts = np.bincount(np.asarray(y, dtype=int), minlength=n_classes).astype(float)
    if np.any(counts == 0):
        raise ValueError("class weights need every class present")
    w = 1.0 / counts
    return w * n_classes / w.sum()


# ---------------------------------------------------------------- tree growing

class _Presorted:
    """Per-feature row orderings shared by every tree of a fit."""

    def __init__(self, X):
        self.X = X
        n, F = X.shape
        self.order = np.argsort(np.where(np.isnan(X), np.inf, X), axis=0, kind="stable")
        self.vals = np.take_along_axis(X, self.order, axis=0)
        self.present = ~np.isnan(self.vals)
        self.cols = np.arange(F)
        self.pos = np.arange(n)[:, None]


_TIE_RTOL = 1e-10


def _best_split(ps: _Presorted, in_node, g, h, cfg):
    """Exact best split over all features for the rows flagged in ``in_node``."""
    lam, mcw = cfg.lambda_l2, cfg.min_child_weight
    n = g.size
    sel = in_node[ps.order]
    valid = sel & ps.present
    gs = np.where(valid, g[ps.order], 0.0)
    hs = np.where(valid, h[ps.order], 0.0)
    GL = np.cumsum(gs, axis=0)
    HL = np.cumsum(hs, axis=0)
    G = g[in_node].sum()
    H = h[in_node].sum()
    Gm = G - GL[-1]
    Hm = H - HL[-1]
    # index of the next valid position below each row
    idx = np.where(valid, ps.pos, n)
    nxt = np.minimum.accumulate(idx[::-1], axis=0)[::-1]
    nxt = np.vstack([nxt[1:], np.full((1, idx.shape[1]), n)])
    has_next = nxt < n
    nxt_val = np.take_along_axis(ps.vals, np.minimum(nxt, n - 1), axis=0)
    cand = valid & has_next & (nxt_val > ps.vals)
    if not cand.any():
        return None
    parent = G * G / (H + lam)
    best = None
    for miss_left in (True, False):
        gl = GL + Gm if miss_left else GL
        hl = HL + Hm if miss_left else HL
        gr, hr = G - gl, H - hl
        ok = cand & (hl >= mcw) & (hr >= mcw)
        if not ok.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
        gain = np.where(ok, gain, -np.inf)
        # feature-major order: ties go to the lowest feature, then lowest threshold.
        # Gains equal up to rounding count as ties so that the choice does not
        # depend on summation order (e.g. duplicated rows).
        top = gain.max()
        flat = int(np.argmax((gain >= top - _TIE_RTOL * abs(top)).T))
        f, i = divmod(flat, n)
        val = gain[i, f]
        if best is None or val > best[0] + _TIE_RTOL * abs(best[0]):
            thr = 0.5 * (ps.vals[i, f] + nxt_val[i, f])
            if not thr > ps.vals[i, f]:  # adjacent floats
                thr = nxt_val[i, f]
            best = (float(val), int(f), float(thr), miss_left)
    if best is None or not best[0] > 1e-12:
        return None
    return best


def _grow_tree(ps: _Presorted, g, h, cfg: TrainConfig, rows_mask):
    X = ps.X
    lam = cfg.lambda_l2
    nodes = []  # dicts

    def new_node(mask, depth):
        nodes.append({"mask": mask, "depth": depth, "feature": -1, "threshold": 0.0,
                      "left": -1, "right": -1, "missing_left": False,
                      "G": float(g[mask].sum()), "H": float(h[mask].sum())})
        return len(nodes) - 1

    root = new_node(rows_mask, 0)
    heap = []
    counter = 0

    def push(i):
        nonlocal counter
        nd = nodes[i]
        if nd["depth"] >= cfg.max_depth:
            return
        split = _best_split(ps, nd["mask"], g, h, cfg)
        if split is not None:
            heapq.heappush(heap, (-split[0], counter, i, split))
            counter += 1

    push(root)
    n_leaves = 1
    while heap and n_leaves < cfg.max_leaves:
        _, _, i, (gain, f, thr, miss_left) = heapq.heappop(heap)
        nd = nodes[i]
        col = X[:, f]
        isnan = np.isnan(col)
        go_left = np.where(isnan, miss_left, col < thr)
        lmask = nd["mask"] & go_left
        rmask = nd["mask"] & ~go_left
        nd.update(feature=f, threshold=thr, missing_left=miss_left)
        nd["left"] = new_node(lmask, nd["depth"] + 1)
        nd["right"] = new_node(rmask, nd["depth"] + 1)
        n_leaves += 1
        push(nd["left"])
        push(nd["right"])

    k = len(nodes)
    tree = Tree(
        feature=np.array([nd["feature"] for nd in nodes], dtype=int),
        threshold=np.array([nd["threshold"] for nd in nodes], dtype=float),
        left=np.array([nd["left"] for nd in nodes], dtype=int),
        right=np.array([nd["right"] for nd in nodes], dtype=int),
        missing_left=np.array([nd["missing_left"] for nd in nodes], dtype=bool),
        value=np.zeros(k),
        cover=np.array([nd["H"] for nd in nodes], dtype=float),
    )
    for i, nd in enumerate(nodes):
        if nd["feature"] < 0:
            tree.value[i] = -cfg.learning_rate * nd["G"] / (nd["H"] + lam)
    # internal covers as exact sums of their children
    for i in range(k - 1, -1, -1):
        if tree.feature[i] >= 0:
            tree.cover[i] = tree.cover[tree.left[i]] + tree.cover[tree.right[i]]
    return tree


def fit(X, y, config: TrainConfig | None = None, valid=None, feature_names=None,
        n_classes=15, sample_weight=None, base_score=None):
    """Train a softmax boosted ensemble.

    Parameters
    ----------
    X : array (n_samples, n_features), ``nan`` for missing values
    y : int labels in ``0..n_classes-1``
    valid : (X_valid, y_valid), optional
        Enables early stopping on validation macro-AUC.
    sample_weight : per-row weights multiplying gradients and hessians
        (use ``inverse_frequency_weights`` for class weighting).
    """
    cfg = config or TrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    n, F = X.shape
    if feature_names is None:
        feature_names = tuple(f"f{i}" for i in range(F))
    if len(feature_names) != F:
        raise ValueError("feature_names does not match the number of columns")
    if np.isnan(X).all(axis=0).any():
        bad = [feature_names[i] for i in np.flatnonzero(np.isnan(X).all(axis=0))]
        raise ValueError(f"all-missing feature column(s): {bad}")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    if np.unique(y).size < 2:
        raise ValueError("degenerate labels: only one class present")
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)

    base = np.zeros(n_classes) if base_score is None else np.asarray(base_score, dtype=float)
    ens = TreeEnsemble(n_classes, base, cfg.learning_rate, tuple(feature_names), [], cfg)
    ps = _Presorted(X)
    onehot = np.eye(n_classes)[y]
    margin = np.tile(base, (n, 1))
    all_rows = np.ones(n, dtype=bool)

    if valid is not None:
        Xv = np.asarray(valid[0], dtype=float)
        yv = np.asarray(valid[1], dtype=int)
        margin_v = np.tile(base, (Xv.shape[0], 1))
    best_score, best_round, since_best = -np.inf, 0, 0
    for rnd in range(cfg.n_rounds):
        p = softmax(margin)
        grad = (p - onehot) * w[:, None]
        hess = np.maximum(p * (1.0 - p), 1e-16) * w[:, None]
        trees = []
        for k in range(n_classes):
            t = _grow_tree(ps, grad[:, k], hess[:, k], cfg, all_rows)
            trees.append(t)
            margin[:, k] += t.predict(X)
        ens.rounds.append(trees)
        if valid is not None:
            for k, t in enumerate(trees):
                margin_v[:, k] += t.predict(Xv)
            score = macro_auc(softmax(margin_v), yv, n_classes=n_classes,
                              warn=False).macro
            ens.history.append({"round": rnd + 1, "valid_macro_auc": score})
            if score > best_score + 1e-12:
                best_score, best_round, since_best = score, rnd + 1, 0
            else:
                since_best += 1
                if cfg.early_stopping_rounds and since_best >= cfg.early_stopping_rounds:
                    log.info("early stop at round %d (best %d, auc %.4f)",
                             rnd + 1, best_round, best_score)
                    break
    if valid is not None and best_round > 0:
        ens.rounds = ens.rounds[:best_round]
    return ens


def predict_proba(ensemble: TreeEnsemble, features, feature_names=None):
    """Class probabilities for one feature vector (mapping, FeatureVector or array)."""
    if hasattr(features, "values") and isinstance(getattr(features, "values"), dict):
        features = features.values
    if isinstance(features, dict):
        missing = [n for n in ensemble.feature_names if n not in features]
        if missing:
            raise ValueError(f"unknown feature layout: missing {missing}")
        x = np.array([features[n] for n in ensemble.feature_names], dtype=float)
    else:
        x = np.asarray(features, dtype=float)
        if feature_names is not None and tuple(feature_names) != ensemble.feature_names:
            raise ValueError("unknown feature layout: names differ from the model's")
        if x.shape[-1] != ensemble.n_features:
            raise ValueError("unknown feature layout: wrong number of features")
    p = ensemble.predict_proba(np.atleast_2d(x))
    return p[0] if np.ndim(x) == 1 else p


def grid_search(configs, train, valid, feature_names=None, n_classes=15, **fit_kw):
    """Pick the config with the best validation macro-AUC (ties -> lowest index)."""
    configs = list(configs)
    if not configs:
        raise ValueError("grid_search needs at least one config")
    report = []
    best_i, best_score = 0, -np.inf
    for i, cfg in enumerate(configs):
        Xt, yt = train
        Xv, yv = valid
        if cfg.n_rounds == 0:
            ens = TreeEnsemble(n_classes, np.zeros(n_classes), cfg.learning_rate,
                               tuple(feature_names or (f"f{j}" for j in range(np.shape(Xt)[1]))),
                               [], cfg)
        else:
            ens = fit(Xt, yt, cfg, valid=(Xv, yv), feature_names=feature_names,
                      n_classes=n_classes, **fit_kw)
        score = macro_auc(ens.predict_proba(Xv), yv, n_classes=n_classes, warn=False).macro
        if not math.isfinite(score):
            score = -np.inf
        report.append({"index": i, "config": asdict(cfg), "valid_macro_auc": score})
        if score > best_score:
            best_i, best_score = i, score
    return configs[best_i], report
