"""Subject-level splits, one-vs-rest AUCs, bootstrap intervals, 15 -> 4 consolidation."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

SPLITS = ("train", "valid", "test")

# 18-34, 35-49, 50-64, 65-92
DEFAULT_CONSOLIDATION = (0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 3, 3)


# ---------------------------------------------------------------- splitting

def _allocate(n, ratios):
    """Largest-remainder allocation with at least one member per split."""
    ratios = np.asarray(ratios, dtype=float)
    ratios = ratios / ratios.sum()
    raw = n * ratios
    counts = np.floor(raw).astype(int)
    frac = raw - counts
    for j in sorted(range(len(ratios)), key=lambda j: (-frac[j], j))[: n - counts.sum()]:
        counts[j] += 1
    while np.any(counts == 0):
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[int(np.flatnonzero(counts == 0)[0])] += 1
    return counts


def stratified_split(record_ids, groups, ratios=(0.6, 0.2, 0.2), seed=0):
    """Assign every record to train/valid/test, stratified by age group.

    The result depends only on the (record_id, group) pairs and the seed,
    not on the order they are passed in.
    """
    record_ids = list(record_ids)
    groups = np.asarray(groups, dtype=int)
    if len(record_ids) != groups.size:
        raise ValueError("record_ids and groups differ in length")
    if len(set(record_ids)) != len(record_ids):
        raise ValueError("record_ids must be unique")
    out = {}
    for g in sorted(set(groups.tolist())):
        members = sorted(rid for rid, gg in zip(record_ids, groups) if gg == g)
        if len(members) < len(ratios):
            raise ValueError(f"age group {g} has {len(members)} subject(s); need >= {len(ratios)}")
        rng = np.random.default_rng([seed, g])
        perm = rng.permutation(len(members))
        counts = _allocate(len(members), ratios)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j, name in enumerate(SPLITS[:len(ratios)]):
            for k in perm[bounds[j]:bounds[j + 1]]:
                out[members[k]] = name
    return out


# ---------------------------------------------------------------- AUC

@dataclass
class AucResult:
    per_class: np.ndarray
    macro: float

    @property
    def available(self):
        return np.flatnonzero(np.isfinite(self.per_class))


def binary_auc(scores, positive):
    """Rank-based AUC with midranks for ties; ``nan`` when a side is empty."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(scores, labels, n_classes=None, require=None, warn=True) -> AucResult:
    """One-vs-rest AUC per class and their unweighted mean.

    Classes without both positives and negatives get ``nan`` and are left out
    of the mean. ``require`` lists classes that must be scoreable; if one is
    not, the macro value is ``nan`` (used by the bootstrap to redraw).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    k = scores.shape[1] if n_classes is None else n_classes
    per = np.array([binary_auc(scores[:, c], labels == c) for c in range(k)])
    ok = np.isfinite(per)
    if require is not None and not ok[list(require)].all():
        return AucResult(per, math.nan)
    if not ok.any():
        raise ValueError("no class has both positive and negative samples")
    if warn and not ok.all():
        warnings.warn(f"AUC undefined for classes {np.flatnonzero(~ok).tolist()}; "
                      "excluded from the macro mean", RuntimeWarning, stacklevel=2)
    return AucResult(per, float(per[ok].mean()))


def accuracy(scores, labels):
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


def confusion_matrix(pred, labels, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


# ---------------------------------------------------------------- consolidation

def _check_mapping(mapping, n_from, n_to=None):
    mapping = np.asarray(mapping, dtype=int)
    if mapping.size != n_from:
        raise ValueError(f"mapping must cover all {n_from} groups, got {mapping.size}")
    n_to = int(mapping.max()) + 1 if n_to is None else n_to
    if mapping.min() < 0 or set(mapping.tolist()) != set(range(n_to)):
        raise ValueError(f"mapping must be onto 0..{n_to - 1}")
    return mapping, n_to


def consolidate_probs(scores, mapping, n_to=None):
    scores = np.asarray(scores, dtype=float)
    mapping, n_to = _check_mapping(mapping, scores.shape[1], n_to)
    out = np.zeros((scores.shape[0], n_to))
    for src, dst in enumerate(mapping):
        out[:, dst] += scores[:, src]
    return out


def consolidate_accuracy(scores, labels, mapping=DEFAULT_CONSOLIDATION, n_to=4):
    mapping, n_to = _check_mapping(mapping, np.shape(scores)[1], n_to)
    probs = consolidate_probs(scores, mapping, n_to)
    return accuracy(probs, mapping[np.asarray(labels, dtype=int)])


# ---------------------------------------------------------------- bootstrap

def bootstrap_ci(metric_fn, scores, labels, n=1000, seed=0, max_retries=100, level=95.0):
    """Percentile bootstrap over records.

    Each iteration has its own generator spawned from ``seed``, so the result
    does not depend on evaluation order. Resamples where ``metric_fn`` is
    undefined (``nan`` or ``ValueError``) are redrawn up to ``max_retries``
    times.

    Returns
    -------
    (lo, hi, values)
    """
    if n < 100:
        raise ValueError("use at least 100 bootstrap iterations")
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    m = labels.shape[0]
    children = np.random.SeedSequence(seed).spawn(n)
    values = np.empty(n)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        for _ in range(max_retries + 1):
            idx = rng.integers(0, m, size=m)
            try:
                v = metric_fn(scores[idx], labels[idx])
            except ValueError:
                v = math.nan
            if v is not None and math.isfinite(v):
                values[i] = v
                break
        else:
            raise RuntimeError(f"bootstrap iteration {i}: metric undefined after "
                               f"{max_retries} redraws")
    tail = (100.0 - level) / 2.0
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return float(lo), float(hi), values


def format_ci(point, lo, hi, digits=2):
    """Render ``point (lo, hi)``, e.g. ``0.77 (0.72, 0.80)``."""
    return f"{point:.{digits}f} ({lo:.{digits}f}, {hi:.{digits}f})"


# ---------------------------------------------------------------- report

@dataclass
class MetricReport:
    per_class_auc: list
    macro_auc: float
    accuracy: float
    confusion: list
    ci: dict = field(default_factory=dict)
    n_bootstrap: int = 1000
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["per_class_auc"] = [None if not math.isfinite(v) else v for v in self.per_class_auc]
        d["macro_auc"] = {"point": self.macro_auc, "lo": self.ci["macro_auc"][0],
                          "hi": self.ci["macro_auc"][1],
                          "text": format_ci(self.macro_auc, *self.ci["macro_auc"])}
        d["accuracy"] = {"point": self.accuracy, "lo": self.ci["accuracy"][0],
                         "hi": self.ci["accuracy"][1],
                         "text": format_ci(self.accuracy, *self.ci["accuracy"])}
        d.pop("ci")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def table(self):
        return "\n".join([
            f"macro-AUC  {format_ci(self.macro_auc, *self.ci['macro_auc'])}",
            f"accuracy   {format_ci(self.accuracy, *self.ci['accuracy'])}",
        ])


def evaluate_scores(scores, labels, n_classes=15, n_bootstrap=1000, seed=0, mapping=None):
    """Point metrics plus bootstrap intervals for a score matrix."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    auc = macro_auc(scores, labels, n_classes=n_classes)
    present = auc.available.tolist()

    def auc_fn(s, y):
        return macro_auc(s, y, n_classes=n_classes, require=present, warn=False).macro

    lo, hi, _ = bootstrap_ci(auc_fn, scores, labels, n=n_bootstrap, seed=seed)
    acc = accuracy(scores, labels)
    alo, ahi, _ = bootstrap_ci(accuracy, scores, labels, n=n_bootstrap, seed=seed)
    cm = confusion_matrix(np.argmax(scores, axis=1), labels, n_classes)
    report = MetricReport(auc.per_class.tolist(), auc.macro, acc, cm.tolist(),
                          {"macro_auc": (lo, hi), "accuracy": (alo, ahi)}, n_bootstrap, seed)
    if mapping is not None:
        mapping = np.asarray(mapping, dtype=int)
        n_to = int(mapping.max()) + 1
        cacc = consolidate_accuracy(scores, labels, mapping, n_to)

        def cfn(s, y):
            return consolidate_accuracy(s, y, mapping, n_to)

        clo, chi, _ = bootstrap_ci(cfn, scores, labels, n=n_bootstrap, seed=seed)
        report.extra["consolidated_accuracy"] = {
            "mapping": mapping.tolist(), "point": cacc, "lo": clo, "hi": chi,
            "text": format_ci(cacc, clo, chi, digits=3)}
    return report
