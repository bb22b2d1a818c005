"""Beat-aligned aggregation of saliency maps into per-group mean heartbeats."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .beatdetect import DetectionError, delineate_fiducials, segment_beats, window_samples
from .signal_io import AGE_GROUPS, EcgRecord

SEGMENTS = ("P-onset", "P-offset", "Q", "R", "S", "T", "TP", "other")
# landmark used for each point-like segment
_SEGMENT_LANDMARK = (("P-onset", "p_on"), ("P-offset", "p_off"), ("Q", "q"), ("R", "r"),
                     ("S", "s"), ("T", "t_peak"))
WEIGHTINGS = ("per_subject", "per_beat")


@dataclass(frozen=True)
class Window:
    pre_ms: float = 300.0
    post_ms: float = 500.0

    def samples(self, fs):
        return window_samples(fs, self.pre_ms, self.post_ms)

    def length(self, fs):
        pre, post = self.samples(fs)
        return pre + post + 1


@dataclass
class AggregatedBeat:
    group: int
    window: Window
    fs: float
    mean_signal: np.ndarray
    mean_attribution: np.ndarray
    n_subjects: int
    n_heartbeats: int
    topk_indices: list = field(default_factory=list)
    weighting: str = "per_subject"

    @property
    def r_index(self):
        return self.window.samples(self.fs)[0]

    def time_ms(self):
        return (np.arange(self.mean_signal.size) - self.r_index) * 1000.0 / self.fs

    def to_dict(self):
        g = AGE_GROUPS[self.group]
        return {"group": self.group, "group_label": g.label,
                "window": {"pre_ms": self.window.pre_ms, "post_ms": self.window.post_ms},
                "fs": self.fs, "weighting": self.weighting,
                "n_subjects": self.n_subjects, "n_heartbeats": self.n_heartbeats,
                "time_ms": self.time_ms().tolist(),
                "mean_signal": self.mean_signal.tolist(),
                "mean_attribution": self.mean_attribution.tolist(),
                "topk_indices": [int(i) for i in self.topk_indices]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["group"]), Window(**d["window"]), float(d["fs"]),
                   np.asarray(d["mean_signal"], dtype=float),
                   np.asarray(d["mean_attribution"], dtype=float),
                   int(d["n_subjects"]), int(d["n_heartbeats"]),
                   [int(i) for i in d["topk_indices"]], d.get("weighting", "per_subject"))


@dataclass
class SegmentStats:
    counts: dict
    percentages: dict
    n_groups: int
    n_indices: int
    tolerance_ms: float = 20.0

    def to_dict(self):
        return {"segments": list(SEGMENTS), "counts": self.counts,
                "percentages": self.percentages, "n_groups": self.n_groups,
                "n_indices": self.n_indices, "tolerance_ms": self.tolerance_ms}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


# ---------------------------------------------------------------- alignment

def align_beats(crop_signal, attribution, rpeaks_in_crop, window=Window(), fs=100.0):
    """Slice signal and attribution identically around each R-peak.

    Beats whose window does not fit inside the crop are dropped.
    """
    sig = np.asarray(crop_signal, dtype=float)
    att = np.asarray(attribution, dtype=float)
    if sig.shape != att.shape:
        raise ValueError("signal and attribution differ in length")
    rec = EcgRecord("crop", sig, int(fs))
    try:
        rows, kept = segment_beats(rec, rpeaks_in_crop, window.pre_ms, window.post_ms,
                                   return_peaks=True)
    except DetectionError:
        raise DetectionError("no beat window fits inside the crop") from None
    pre, post = window.samples(fs)
    return [(rows[i], att[r - pre:r + post + 1].copy()) for i, r in enumerate(kept)]


# ---------------------------------------------------------------- aggregation

def aggregate_group(pairs_by_subject, group, window=Window(), fs=100.0,
                    weighting="per_subject", k=8):
    """Mean heartbeat and mean attribution for one age group.

    Parameters
    ----------
    pairs_by_subject : dict subject id -> list of (signal, attribution) beats
    weighting : ``per_subject`` averages within each subject first, then across
        subjects; ``per_beat`` pools every beat.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    subjects = sorted(s for s, pairs in pairs_by_subject.items() if len(pairs) > 0)
    if not subjects:
        raise ValueError("no beats to aggregate")
    n_len = window.length(fs)
    sig_means, att_means, all_sig, all_att = [], [], [], []
    for s in subjects:
        sig = np.stack([np.asarray(p[0], dtype=float) for p in pairs_by_subject[s]])
        att = np.stack([np.asarray(p[1], dtype=float) for p in pairs_by_subject[s]])
        if sig.shape[1] != n_len or att.shape[1] != n_len:
            raise ValueError(f"beats must have {n_len} samples for this window")
        sig_means.append(sig.mean(axis=0))
        att_means.append(att.mean(axis=0))
        all_sig.append(sig)
        all_att.append(att)
    if weighting == "per_subject":
        ms, ma = np.mean(sig_means, axis=0), np.mean(att_means, axis=0)
    else:
        ms, ma = np.concatenate(all_sig).mean(axis=0), np.concatenate(all_att).mean(axis=0)
    n_beats = int(sum(len(a) for a in all_sig))
    agg = AggregatedBeat(int(group), window, float(fs), ms, ma, len(subjects), n_beats,
                         weighting=weighting)
    agg.topk_indices = mark_topk(agg, k)
    return agg


def mark_topk(aggregated: AggregatedBeat, k=8):
    """Indices of the k largest mean attributions, ties to the earlier index."""
    v = np.asarray(aggregated.mean_attribution, dtype=float)
    if not 0 < k <= v.size:
        raise ValueError(f"k must be in 1..{v.size}")
    return [int(i) for i in np.argsort(-v, kind="stable")[:k]]


# ---------------------------------------------------------------- segments

def delineate_mean_beat(aggregated: AggregatedBeat):
    """Landmark indices of the mean beat (``None`` where not found)."""
    x = np.asarray(aggregated.mean_signal, dtype=float)
    r = aggregated.r_index
    # the delineator scales its search windows to neighbouring RR intervals,
    # so present the beat twice back to back
    rec = EcgRecord("mean_beat", np.concatenate([x, x]), int(aggregated.fs))
    fid = delineate_fiducials(rec, [r, r + x.size])
    return fid.beat(0)


def _assign(idx, landmarks, tol):
    best, best_d = None, None
    for name, key in _SEGMENT_LANDMARK:
        v = landmarks.get(key)
        if v is None:
            continue
        d = abs(idx - v)
        if d <= tol and (best_d is None or d < best_d):
            best, best_d = name, d
    if best is not None:
        return best
    p_on, t_off = landmarks.get("p_on"), landmarks.get("t_off")
    if (t_off is not None and idx >= t_off) or (p_on is not None and idx <= p_on):
        return "TP"
    return "other"


def segment_stats(aggregates, fiducials=None, tolerance_ms=20.0) -> SegmentStats:
    """Share of top-k indices falling on each fiducial segment, over groups.

    ``fiducials`` optionally supplies one landmark dict per aggregate; by
    default each mean beat is delineated here. A group whose mean beat cannot
    be delineated contributes all of its indices to ``other``.
    """
    counts = {s: 0 for s in SEGMENTS}
    total = 0
    for i, agg in enumerate(aggregates):
        if fiducials is not None:
            lm = fiducials[i]
        else:
            try:
                lm = delineate_mean_beat(agg)
            except (DetectionError, ValueError):
                lm = None
        tol = int(round(tolerance_ms * agg.fs / 1000.0))
        for idx in agg.topk_indices:
            seg = "other" if lm is None else _assign(int(idx), lm, tol)
            counts[seg] += 1
            total += 1
    if total == 0:
        raise ValueError("no top-k indices to classify")
    pct = {s: 100.0 * c / total for s, c in counts.items()}
    return SegmentStats(counts, pct, len(aggregates), total, tolerance_ms)


def write_aggregates_json(path, aggregates, extra=None):
    doc = {"aggregates": [a.to_dict() for a in aggregates]}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, indent=1, sort_keys=True))


def read_aggregates_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    return [AggregatedBeat.from_dict(d) for d in doc["aggregates"]]
