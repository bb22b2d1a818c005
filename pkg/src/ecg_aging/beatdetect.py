"""R-peak detection, fiducial delineation and beat segmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import signal as ss
from scipy.ndimage import uniform_filter1d

LANDMARKS = ("p_on", "p_peak", "p_off", "q", "r", "s", "t_peak", "t_off")


class DetectionError(ValueError):
    pass


@dataclass
class FiducialSet:
    """Per-beat landmark indices; ``None`` marks a landmark not found."""

    p_on: list = field(default_factory=list)
    p_peak: list = field(default_factory=list)
    p_off: list = field(default_factory=list)
    q: list = field(default_factory=list)
    r: list = field(default_factory=list)
    s: list = field(default_factory=list)
    t_peak: list = field(default_factory=list)
    t_off: list = field(default_factory=list)

    def __len__(self):
        return len(self.r)

    def beat(self, i) -> dict:
        return {name: getattr(self, name)[i] for name in LANDMARKS}

    def to_json(self) -> str:
        return json.dumps({f.name: [None if v is None else int(v) for v in getattr(self, f.name)]
                           for f in fields(self)})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(**{k: list(data[k]) for k in LANDMARKS})

    def ordering_ok(self, i) -> bool:
        vals = [(name, v) for name, v in self.beat(i).items() if v is not None]
        for (a, va), (b, vb) in zip(vals, vals[1:]):
            weak = (a, b) in (("p_on", "p_peak"), ("p_peak", "p_off"), ("p_on", "p_off"),
                              ("t_peak", "t_off"))
            if (va > vb) if weak else (va >= vb):
                return False
        return True


def _ms(fs, ms):
    return int(round(ms * fs / 1000.0))


def detect_rpeaks(record, search_back=True):
    """Pan-Tompkins style QRS detection.

    Band-pass 5-15 Hz, derivative, squaring and a 150 ms moving-window
    integration feed a dual adaptive threshold with search-back for missed
    beats. Each detection is moved to the largest raw sample within +-50 ms.

    Parameters
    ----------
    record : EcgRecord
    search_back : bool
        Re-examine sub-threshold candidates when an RR gap exceeds 1.66 times
        the running mean RR.

    Returns
    -------
    numpy.ndarray of int
        Sorted R-peak sample indices.
    """
    x = np.asarray(record.samples, dtype=float)
    fs = record.fs
    if x.size < 3 * fs:
        raise DetectionError("record shorter than 3 s")
    if not np.all(np.isfinite(x)):
        raise DetectionError("record contains non-finite samples; impute first")
    if np.ptp(x) == 0:
        raise DetectionError("flat signal")

    nyq = fs / 2.0
    hi = min(15.0, 0.9 * nyq)
    sos = ss.butter(3, [5.0 / nyq, hi / nyq], btype="band", output="sos")
    filt = ss.sosfiltfilt(sos, x)
    deriv = np.gradient(filt)
    mwi = uniform_filter1d(deriv ** 2, size=max(_ms(fs, 150), 1), mode="nearest")
    if np.ptp(mwi) == 0:
        raise DetectionError("flat signal")

    refractory = _ms(fs, 200)
    cand, _ = ss.find_peaks(mwi, distance=max(refractory, 1))
    if cand.size < 2:
        raise DetectionError("fewer than 2 peaks found")
    heights = mwi[cand]
    slope = np.abs(deriv)
    half = _ms(fs, 75)

    def max_slope(k):
        return slope[max(k - half, 0):k + half + 1].max()

    learn = x.size if x.size < 2 * fs else 2 * fs
    spki = 0.25 * mwi[:learn].max()
    npki = 0.5 * mwi[:learn].mean()
    qrs = []
    qrs_slopes = []
    skipped = []
    rr_recent = []

    def thresholds():
        t1 = npki + 0.25 * (spki - npki)
        return t1, 0.5 * t1

    for k, h in zip(cand, heights):
        t1, t2 = thresholds()
        if h > t1:
            if qrs and k - qrs[-1] < _ms(fs, 360):
                # possible T wave: keep only if steep enough
                if max_slope(k) < 0.5 * qrs_slopes[-1]:
                    npki = 0.125 * h + 0.875 * npki
                    continue
            qrs.append(k)
            qrs_slopes.append(max_slope(k))
            spki = 0.125 * h + 0.875 * spki
            if len(qrs) > 1:
                rr_recent.append(qrs[-1] - qrs[-2])
                rr_recent = rr_recent[-8:]
            skipped = []
        else:
            npki = 0.125 * h + 0.875 * npki
            skipped.append((k, h))
            if search_back and len(qrs) > 1 and rr_recent:
                rr_avg = float(np.mean(rr_recent))
                if k - qrs[-1] > 1.66 * rr_avg:
                    pool = [(kk, hh) for kk, hh in skipped
                            if hh > t2 and kk - qrs[-1] > refractory]
                    if pool:
                        kk, hh = max(pool, key=lambda p: p[1])
                        qrs.append(kk)
                        qrs_slopes.append(max_slope(kk))
                        spki = 0.25 * hh + 0.75 * spki
                        rr_recent.append(qrs[-1] - qrs[-2])
                        rr_recent = rr_recent[-8:]
                        skipped = [(a, b) for a, b in skipped if a > kk]

    if len(qrs) < 2:
        raise DetectionError("fewer than 2 peaks found")
    peaks = np.asarray(sorted(qrs), dtype=int)
    peaks = refine_peaks(x, peaks, _ms(fs, 50))
    # merge detections closer than the refractory period, keeping the taller
    keep = [peaks[0]]
    for p in peaks[1:]:
        if p - keep[-1] < refractory:
            if x[p] > x[keep[-1]]:
                keep[-1] = p
        else:
            keep.append(p)
    out = np.asarray(keep, dtype=int)
    if out.size < 2:
        raise DetectionError("fewer than 2 peaks found")
    return out


def refine_peaks(x, peaks, radius):
    out = np.empty_like(peaks)
    for i, p in enumerate(peaks):
        lo, hi = max(p - radius, 0), min(p + radius + 1, x.size)
        out[i] = lo + int(np.argmax(x[lo:hi]))
    return np.unique(out)


def match_peaks(detected, reference, tolerance):
    """Greedy one-to-one matching; returns ``(tp, fp, fn)``."""
    detected = np.sort(np.asarray(detected))
    reference = np.sort(np.asarray(reference))
    used = np.zeros(detected.size, dtype=bool)
    tp = 0
    for r in reference:
        if detected.size == 0:
            break
        j = np.searchsorted(detected, r)
        best, best_d = None, None
        for c in (j - 1, j):
            if 0 <= c < detected.size and not used[c]:
                d = abs(int(detected[c]) - int(r))
                if d <= tolerance and (best_d is None or d < best_d):
                    best, best_d = c, d
        if best is not None:
            used[best] = True
            tp += 1
    return tp, int(detected.size - tp), int(reference.size - tp)


def f1_score(detected, reference, tolerance):
    tp, fp, fn = match_peaks(detected, reference, tolerance)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 1.0


# ---------------------------------------------------------------- delineation

@dataclass(frozen=True)
class DelineationConfig:
    q_window_ms: float = 80.0
    s_window_ms: float = 80.0
    p_window_ms: tuple = (250.0, 50.0)   # before R
    t_window_ms: tuple = (80.0, 420.0)   # after R
    edge_fraction: float = 0.05
    min_prominence: float = 0.03         # fraction of the beat's R height
    smooth_hz: float = 40.0


def _smooth(x, fs, cutoff):
    nyq = fs / 2.0
    if cutoff >= 0.95 * nyq or x.size < 30:
        return x
    sos = ss.butter(2, cutoff / nyq, btype="low", output="sos")
    return ss.sosfiltfilt(sos, x)


def _wave_edges(ds, k, lo, hi, frac, search=None):
    """Onset/offset of a positive wave peaking at ``k`` via the derivative rule.

    The steepest slope is looked for within ``search`` samples of the peak;
    the walk outward from it stops at ``lo``/``hi``.
    """
    s_lo = lo if search is None else max(lo, k - search)
    s_hi = hi if search is None else min(hi, k + search)
    left = ds[s_lo:k + 1]
    right = ds[k:s_hi + 1]
    on = off = None
    if left.size > 1:
        j = s_lo + int(np.argmax(left))
        thr = frac * ds[j]
        if ds[j] > 0:
            while j > lo and ds[j] > thr:
                j -= 1
            on = j
    if right.size > 1:
        j = k + int(np.argmin(right))
        thr = frac * ds[j]
        if ds[j] < 0:
            while j < hi and ds[j] < thr:
                j += 1
            off = j
    return on, off


def _peak_in(xs, lo, hi, min_prom, sign=1):
    """Interior extremum of ``sign * xs`` in [lo, hi) with enough prominence."""
    if hi - lo < 3:
        return None
    seg = sign * xs[lo:hi]
    j = int(np.argmax(seg))
    if j == 0 or j == seg.size - 1:
        return None
    prom = seg[j] - max(seg[:j + 1].min(), seg[j:].min())
    if prom < min_prom:
        return None
    return lo + j


def delineate_fiducials(record, rpeaks, config: DelineationConfig | None = None) -> FiducialSet:
    """Locate P/Q/S/T landmarks around each R-peak.

    Q and S are the minima in fixed windows before and after R; P and T peaks
    are maxima in windows scaled to the surrounding RR; wave on/offsets are
    the points where the smoothed derivative falls below ``edge_fraction`` of
    its extreme value on that side of the peak. Landmarks that cannot be found,
    or that would break the within-beat ordering, are left as ``None``.
    """
    cfg = config or DelineationConfig()
    rpeaks = np.asarray(rpeaks, dtype=int)
    if rpeaks.size < 2:
        raise DetectionError("need at least 2 R-peaks")
    x = np.asarray(record.samples, dtype=float)
    fs = record.fs
    n = x.size
    xs = _smooth(x, fs, cfg.smooth_hz)
    ds = np.gradient(xs)
    out = FiducialSet()
    for i, r in enumerate(rpeaks):
        rr_prev = r - rpeaks[i - 1] if i > 0 else rpeaks[1] - rpeaks[0]
        rr_next = rpeaks[i + 1] - r if i + 1 < rpeaks.size else rr_prev
        base_lo = max(r - int(0.5 * rr_prev), 0)
        baseline = float(np.median(xs[base_lo:r + 1]))
        r_height = abs(xs[r] - baseline)
        min_prom = cfg.min_prominence * r_height if r_height > 0 else np.inf

        q_lo = max(r - _ms(fs, cfg.q_window_ms), 0)
        q = _peak_in(xs, q_lo, r + 1, 0.0, sign=-1) if r > q_lo else None
        s_hi = min(r + _ms(fs, cfg.s_window_ms) + 1, n)
        s = _peak_in(xs, r, s_hi, 0.0, sign=-1)

        p_lo = max(r - _ms(fs, cfg.p_window_ms[0]), r - int(0.6 * rr_prev), 0)
        p_hi = r - _ms(fs, cfg.p_window_ms[1])
        if q is not None:
            p_hi = min(p_hi, q)
        p_peak = _peak_in(xs, p_lo, p_hi, min_prom) if p_hi > p_lo else None
        p_on = p_off = None
        if p_peak is not None:
            p_end = q if q is not None else r
            p_on, p_off = _wave_edges(ds, p_peak, max(p_peak - _ms(fs, 150), 0), p_end - 1,
                                      cfg.edge_fraction,
                                      search=max((p_end - p_peak) // 2, 1))

        t_lo = r + _ms(fs, cfg.t_window_ms[0])
        t_hi = min(r + _ms(fs, cfg.t_window_ms[1]), r + int(0.7 * rr_next), n - 1)
        t_peak = _peak_in(xs, t_lo, t_hi, min_prom) if t_hi > t_lo else None
        t_off = None
        if t_peak is not None:
            _, t_off = _wave_edges(ds, t_peak, t_lo, min(t_peak + _ms(fs, 250), n - 1,
                                                         r + int(0.9 * rr_next)),
                                   cfg.edge_fraction, search=_ms(fs, 120))
        beat = dict(p_on=p_on, p_peak=p_peak, p_off=p_off, q=q, r=int(r), s=s,
                    t_peak=t_peak, t_off=t_off)
        _enforce_order(beat)
        for name in LANDMARKS:
            v = beat[name]
            getattr(out, name).append(None if v is None else int(v))
    return out


def _enforce_order(b):
    """Drop landmarks that would violate p_on<=p_peak<=p_off<q<r<s<t_peak<=t_off."""
    r = b["r"]
    if b["q"] is not None and b["q"] >= r:
        b["q"] = None
    if b["s"] is not None and b["s"] <= r:
        b["s"] = None
    if b["p_peak"] is None:
        b["p_on"] = b["p_off"] = None
    else:
        limit = b["q"] if b["q"] is not None else r
        if b["p_peak"] >= limit:
            b["p_on"] = b["p_peak"] = b["p_off"] = None
        else:
            if b["p_on"] is not None and b["p_on"] > b["p_peak"]:
                b["p_on"] = None
            if b["p_off"] is not None and not (b["p_peak"] <= b["p_off"] < limit):
                b["p_off"] = None
    if b["t_peak"] is None:
        b["t_off"] = None
    else:
        floor = b["s"] if b["s"] is not None else r
        if b["t_peak"] <= floor:
            b["t_peak"] = b["t_off"] = None
        elif b["t_off"] is not None and b["t_off"] < b["t_peak"]:
            b["t_off"] = None


# ---------------------------------------------------------------- segmentation

def window_samples(fs, pre_ms, post_ms):
    return _ms(fs, pre_ms), _ms(fs, post_ms)


def segment_beats(record, rpeaks, pre_ms=300.0, post_ms=500.0, return_peaks=False):
    """Stack fixed windows around each R-peak (rows aligned at R).

    Rows are exact slices of the signal of length ``pre + post + 1`` samples;
    beats whose window runs off either end are dropped.
    """
    x = np.asarray(record.samples if hasattr(record, "samples") else record, dtype=float)
    fs = record.fs
    pre, post = window_samples(fs, pre_ms, post_ms)
    rpeaks = np.asarray(rpeaks, dtype=int)
    ok = (rpeaks - pre >= 0) & (rpeaks + post < x.size)
    kept = rpeaks[ok]
    if kept.size == 0:
        raise DetectionError("no beat window fits inside the record")
    rows = np.stack([x[r - pre:r + post + 1] for r in kept])
    return (rows, kept) if return_peaks else rows
