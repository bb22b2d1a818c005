"""Per-record ECG features.

Short-range (``SR_*``) features are per-beat measurements averaged over the
record; long-range (``HRV_*``) features are computed once from the
normal-to-normal interval series. Missing features are ``nan``, never zero.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import interpolate
from scipy.integrate import trapezoid
from scipy import signal as ss

from .beatdetect import FiducialSet, delineate_fiducials, detect_rpeaks

SR_FEATURES = ("SR_rr_mean_ms", "SR_hr_bpm", "SR_p_mV", "SR_q_mV", "SR_r_mV",
               "SR_s_mV", "SR_t_mV")
HRV_FEATURES = ("HRV_SDNN", "HRV_RMSSD", "HRV_pNN20", "HRV_pNN50", "HRV_MCVNN",
                "HRV_SDANN1", "HRV_SDANN5", "HRV_LF", "HRV_HF", "HRV_LFHF",
                "HRV_alpha1", "HRV_alpha2", "HRV_PAS", "HRV_breathing_rate_bpm",
                "HRV_breathing_signal_power")
FEATURE_NAMES = SR_FEATURES + HRV_FEATURES

RR_RANGE_MS = (300.0, 2000.0)
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.40)
RESP_BAND = (0.1, 0.5)
INTERP_HZ = 4.0


@dataclass
class NnSeries:
    rr_ms: np.ndarray
    t_ms: np.ndarray
    n_removed: int = 0

    def __post_init__(self):
        self.rr_ms = np.asarray(self.rr_ms, dtype=float)
        self.t_ms = np.asarray(self.t_ms, dtype=float)
        if np.any(self.rr_ms <= 0):
            raise ValueError("NN intervals must be positive")
        if self.t_ms.size > 1 and np.any(np.diff(self.t_ms) <= 0):
            raise ValueError("NN occurrence times must be strictly increasing")

    @classmethod
    def from_rr(cls, rr_ms, t0_ms=0.0):
        rr = np.asarray(rr_ms, dtype=float)
        return cls(rr, t0_ms + np.cumsum(rr))

    @property
    def start_ms(self) -> float:
        return float(self.t_ms[0] - self.rr_ms[0])

    @property
    def duration_ms(self) -> float:
        return float(self.t_ms[-1] - self.start_ms)

    def __len__(self):
        return self.rr_ms.size


def nn_intervals(rpeaks, fs, rr_range=RR_RANGE_MS) -> NnSeries:
    """RR intervals in ms with out-of-range intervals removed as artefacts."""
    rpeaks = np.asarray(rpeaks, dtype=float)
    if rpeaks.size < 2:
        raise ValueError("need at least 2 R-peaks")
    rr = np.diff(rpeaks) * 1000.0 / fs
    t = rpeaks[1:] * 1000.0 / fs
    ok = (rr >= rr_range[0]) & (rr <= rr_range[1])
    if ok.sum() < 2:
        raise ValueError("fewer than 2 NN intervals remain after artefact removal")
    return NnSeries(rr[ok], t[ok], int((~ok).sum()))


# ---------------------------------------------------------------- time domain

def _segment_ids(nn: NnSeries, minutes):
    width = minutes * 60000.0
    n_full = int(math.floor(nn.duration_ms / width + 1e-9))
    seg = np.floor((nn.t_ms - nn.start_ms - 1e-9) / width).astype(int)
    return seg, n_full


def sdann(nn: NnSeries, minutes) -> float:
    """Mean of the SDNNs of consecutive full ``minutes``-long segments."""
    seg, n_full = _segment_ids(nn, minutes)
    sds = [np.std(nn.rr_ms[seg == k], ddof=1) for k in range(n_full)
           if np.count_nonzero(seg == k) >= 2]
    return float(np.mean(sds)) if sds else math.nan


def sdann_classic(nn: NnSeries, minutes=5) -> float:
    """Standard deviation of the segment mean NN intervals (the textbook SDANN)."""
    seg, n_full = _segment_ids(nn, minutes)
    means = [nn.rr_ms[seg == k].mean() for k in range(n_full) if np.any(seg == k)]
    return float(np.std(means, ddof=1)) if len(means) >= 2 else math.nan


def time_domain_hrv(nn: NnSeries) -> dict:
    rr = nn.rr_ms
    d = np.diff(rr)
    med = np.median(rr)
    return {
        "SDNN": float(np.std(rr, ddof=1)),
        "RMSSD": float(np.sqrt(np.mean(d ** 2))) if d.size else math.nan,
        "pNN20": float(100.0 * np.count_nonzero(np.abs(d) > 20) / d.size) if d.size else math.nan,
        "pNN50": float(100.0 * np.count_nonzero(np.abs(d) > 50) / d.size) if d.size else math.nan,
        "MCVNN": float(np.median(np.abs(rr - med)) / med),
        "SDANN1": sdann(nn, 1),
        "SDANN5": sdann(nn, 5),
    }


# ---------------------------------------------------------------- DFA

def dfa_fluctuation(x, scales):
    """Root-mean-square residual of per-box linear fits of the integrated series."""
    x = np.asarray(x, dtype=float)
    y = np.cumsum(x - x.mean())
    out = np.empty(len(scales))
    for i, n in enumerate(scales):
        m = y.size // n
        boxes = y[:m * n].reshape(m, n)
        t = np.arange(n) - (n - 1) / 2.0
        slope = boxes @ t / (t @ t)
        resid = boxes - boxes.mean(axis=1, keepdims=True) - np.outer(slope, t)
        out[i] = np.sqrt(np.mean(resid ** 2))
    return out


@functools.lru_cache(maxsize=None)
def _white_profile_rss(n):
    """Expected residual sum of squares of a linear fit to an n-step random walk."""
    i = np.arange(1, n + 1, dtype=float)
    cov = np.minimum.outer(i, i)
    design = np.column_stack([np.ones(n), i])
    hat = design @ np.linalg.pinv(design)
    return float(np.trace((np.eye(n) - hat) @ cov))


def small_scale_correction(scales):
    """Kantelhardt-style K(n): expected white-noise F(n) relative to sqrt(n).

    Linear detrending inflates F at small boxes; dividing by K(n) makes the
    expected slope for uncorrelated input exactly 0.5.
    """
    scales = np.asarray(scales)
    f_white = np.sqrt([_white_profile_rss(int(n)) / n for n in scales])
    return f_white / np.sqrt(scales)


def dfa_slope(x, lo, hi, corrected=True):
    scales = np.arange(lo, hi + 1)
    f = dfa_fluctuation(x, scales)
    if np.any(f <= 0):
        return math.nan
    if corrected:
        f = f / small_scale_correction(scales)
    return float(np.polyfit(np.log(scales), np.log(f), 1)[0])


def dfa_alpha(nn: NnSeries, short=(4, 16), long=(16, 64), min_short=100, min_long=300,
              corrected=True):
    rr = nn.rr_ms
    a1 = dfa_slope(rr, *short, corrected=corrected) if rr.size >= min_short else math.nan
    a2 = dfa_slope(rr, *long, corrected=corrected) if rr.size >= min_long else math.nan
    return {"alpha1": a1, "alpha2": a2}


# ---------------------------------------------------------------- frequency domain

def _uniform(t_s, values, fs_out):
    grid = np.arange(t_s[0], t_s[-1], 1.0 / fs_out)
    kind = "cubic" if t_s.size >= 4 else "linear"
    f = interpolate.interp1d(t_s, values, kind=kind)
    return grid, f(grid)


def _band_power(freqs, psd, band):
    mask = (freqs >= band[0]) & (freqs <= band[1])
    if mask.sum() < 2:
        return 0.0
    return float(trapezoid(psd[mask], freqs[mask]))


def _welch(x, fs, nmax):
    nper = min(x.size, nmax)
    return ss.welch(x, fs=fs, nperseg=nper, detrend="linear", window="hann")


def freq_domain_hrv(nn: NnSeries, fs_interp=INTERP_HZ, min_duration_ms=120000.0):
    """LF/HF band powers (ms^2) of the 4 Hz-resampled tachogram."""
    if nn.duration_ms < min_duration_ms:
        return {"LF": math.nan, "HF": math.nan, "LFHF": math.nan}
    _, tach = _uniform(nn.t_ms / 1000.0, nn.rr_ms, fs_interp)
    freqs, psd = _welch(tach, fs_interp, 256)
    lf = _band_power(freqs, psd, LF_BAND)
    hf = _band_power(freqs, psd, HF_BAND)
    return {"LF": lf, "HF": hf, "LFHF": lf / hf if hf > 0 else math.nan}


def total_power(nn: NnSeries, fs_interp=INTERP_HZ):
    _, tach = _uniform(nn.t_ms / 1000.0, nn.rr_ms, fs_interp)
    freqs, psd = _welch(tach, fs_interp, 256)
    return float(trapezoid(psd, freqs))


# ---------------------------------------------------------------- fragmentation

def fragmentation_pas(nn: NnSeries, min_run=4) -> float:
    """Percentage of NN intervals inside alternation segments.

    An alternation segment is a maximal run of successive differences with
    strictly alternating signs (a zero difference ends the run); only runs of
    at least ``min_run`` differences count. A run of k differences covers
    k + 1 intervals.
    """
    rr = nn.rr_ms
    n = rr.size
    if n < 2:
        return 0.0
    sign = np.sign(np.diff(rr))
    covered = np.zeros(n, dtype=bool)
    start = None
    for i in range(sign.size + 1):
        alive = i < sign.size and sign[i] != 0
        if alive and start is not None and sign[i] == -sign[i - 1]:
            continue
        if start is not None and i - start >= min_run:
            covered[start:i + 1] = True
        start = i if alive else None
    return float(min(100.0, 100.0 * covered.sum() / n))


# ---------------------------------------------------------------- respiration

def edr_breathing(record, rpeaks, fs_interp=INTERP_HZ, band=RESP_BAND, min_ratio=5.0,
                  min_rel_power=1e-4, min_beats=30):
    """Breathing rate and band power from the R-amplitude series.

    The rate is reported as ``nan`` when the spectral peak does not stand at
    least ``min_ratio`` times above the median power of the band, or when the
    band power is below ``min_rel_power`` times the squared mean R amplitude.
    """
    rpeaks = np.asarray(rpeaks, dtype=int)
    if rpeaks.size < min_beats:
        return {"breathing_rate_bpm": math.nan, "breathing_signal_power": math.nan}
    amp = np.asarray(record.samples, dtype=float)[rpeaks]
    _, series = _uniform(rpeaks / record.fs, amp, fs_interp)
    series = ss.detrend(series)
    if np.ptp(series) == 0:
        return {"breathing_rate_bpm": math.nan, "breathing_signal_power": 0.0}
    freqs, psd = _welch(series, fs_interp, 512)
    power = _band_power(freqs, psd, band)
    mask = np.flatnonzero((freqs >= band[0]) & (freqs <= band[1]))
    j = mask[int(np.argmax(psd[mask]))]
    med = np.median(psd[mask])
    weak = power < min_rel_power * float(np.mean(amp)) ** 2
    if weak or med <= 0 or psd[j] < min_ratio * med:
        return {"breathing_rate_bpm": math.nan, "breathing_signal_power": power}
    f_peak = freqs[j]
    if 0 < j < freqs.size - 1:
        a, b, c = np.log(psd[j - 1:j + 2] + 1e-300)
        den = a - 2 * b + c
        if den < 0:
            f_peak += 0.5 * (a - c) / den * (freqs[1] - freqs[0])
    return {"breathing_rate_bpm": float(60.0 * f_peak), "breathing_signal_power": power}


# ---------------------------------------------------------------- short range

def _baseline(x, fid: FiducialSet, i, fs):
    """Median of the TP segment that precedes beat ``i``."""
    r = fid.r[i]
    end = fid.p_on[i] if fid.p_on[i] is not None else r - int(0.25 * fs)
    start = None
    if i > 0 and fid.t_off[i - 1] is not None:
        start = fid.t_off[i - 1]
    if start is None or start >= end:
        start = end - int(0.1 * fs)
    start, end = max(start, 0), max(end, 0)
    if end - start < 1:
        return float(np.median(x[max(r - int(0.3 * fs), 0):max(r - int(0.2 * fs), 1)]))
    return float(np.median(x[start:end + 1]))


def sr_beat_features(record, fiducials: FiducialSet) -> dict:
    """Per-beat short-range values as arrays (``nan`` where a landmark is absent)."""
    x = np.asarray(record.samples, dtype=float)
    fs = record.fs
    nb = len(fiducials)
    if nb < 1:
        raise ValueError("no beats")
    rows = {k: np.full(nb, np.nan) for k in ("rr_ms", "hr_bpm", "p_mV", "q_mV", "r_mV",
                                             "s_mV", "t_mV")}
    for i in range(nb):
        base = _baseline(x, fiducials, i, fs)
        for key, lm in (("p_mV", "p_peak"), ("q_mV", "q"), ("r_mV", "r"), ("s_mV", "s"),
                        ("t_mV", "t_peak")):
            k = getattr(fiducials, lm)[i]
            if k is not None:
                rows[key][i] = x[k] - base
        if i + 1 < nb:
            rr = (fiducials.r[i + 1] - fiducials.r[i]) * 1000.0 / fs
            rows["rr_ms"][i] = rr
            rows["hr_bpm"][i] = 60000.0 / rr
    return rows


def _nanmean(v):
    v = np.asarray(v, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else math.nan


@dataclass
class FeatureVector:
    record_id: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values[name]

    def as_array(self, names=FEATURE_NAMES):
        return np.array([self.values.get(n, math.nan) for n in names], dtype=float)


def record_feature_vector(record, rpeaks=None, include_alpha_mean=False) -> FeatureVector:
    """Full SR + HRV feature vector for one record."""
    if rpeaks is None:
        rpeaks = detect_rpeaks(record)
    fid = delineate_fiducials(record, rpeaks)
    sr = sr_beat_features(record, fid)
    nn = nn_intervals(rpeaks, record.fs)
    out = {}
    rr_mean = _nanmean(sr["rr_ms"])
    out["SR_rr_mean_ms"] = rr_mean
    out["SR_hr_bpm"] = 60000.0 / rr_mean if rr_mean > 0 else math.nan
    for key in ("p", "q", "r", "s", "t"):
        out[f"SR_{key}_mV"] = _nanmean(sr[f"{key}_mV"])
    for k, v in time_domain_hrv(nn).items():
        out[f"HRV_{k}"] = v
    for k, v in freq_domain_hrv(nn).items():
        out[f"HRV_{k}"] = v
    alphas = dfa_alpha(nn)
    out["HRV_alpha1"], out["HRV_alpha2"] = alphas["alpha1"], alphas["alpha2"]
    out["HRV_PAS"] = fragmentation_pas(nn) if len(nn) >= 5 else math.nan
    for k, v in edr_breathing(record, rpeaks).items():
        out[f"HRV_{k}"] = v
    if include_alpha_mean:
        out["HRV_alpha_mean"] = float(np.nanmean([alphas["alpha1"], alphas["alpha2"]])) \
            if np.isfinite([alphas["alpha1"], alphas["alpha2"]]).any() else math.nan
    ordered = {n: out[n] for n in FEATURE_NAMES}
    ordered.update({k: v for k, v in out.items() if k not in ordered})
    return FeatureVector(record.record_id, ordered)


# ---------------------------------------------------------------- table IO

def write_feature_table(path, vectors, names=FEATURE_NAMES, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("record_id",) + tuple(names))
        for v in vectors:
            w.writerow([v.record_id] + ["" if not np.isfinite(v.values.get(n, math.nan))
                                        else repr(float(v.values[n])) for n in names])


def read_feature_table(path):
    """Return ``(record_ids, names, matrix)`` with ``nan`` for empty cells."""
    ids, rows = [], []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    names = tuple(header[1:])
    for row in reader:
        ids.append(row[0])
        rows.append([float(c) if c != "" else math.nan for c in row[1:]])
    return ids, names, np.array(rows, dtype=float).reshape(len(ids), len(names))
