"""Synthetic single-lead ECG with exact ground truth.

Each beat is a sum of five Gaussian waves (P, Q, R, S, T) placed relative to
the beat's R time. RR intervals come from a white, pink (1/f) or alternating
process rescaled to a target SDNN, and the R amplitude is modulated
sinusoidally at the respiration frequency. Cohorts draw per-record parameters
from a per-age-group trend table with multiplicative jitter.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .beatdetect import FiducialSet
from .signal_io import AGE_GROUPS, N_GROUPS, EcgRecord

WAVES = ("P", "Q", "R", "S", "T")

DEFAULT_AMPLITUDES = {"P": 0.15, "Q": -0.10, "R": 1.0, "S": -0.20, "T": 0.30}
# Gaussian standard deviations, ms
DEFAULT_WIDTHS = {"P": 22.0, "Q": 8.0, "R": 10.0, "S": 8.0, "T": 45.0}
# wave centres relative to R, ms
DEFAULT_OFFSETS = {"P": -180.0, "Q": -30.0, "R": 0.0, "S": 30.0, "T": 280.0}
# on/offset of a Gaussian wave in ground truth: centre -/+ this many widths
EDGE_WIDTHS = 3.0

RR_MODELS = ("white", "pink", "alternating")


@dataclass(frozen=True)
class SynthParams:
    mean_hr: float = 65.0
    sdnn_target: float = 40.0
    respiration_hz: float = 0.25
    respiration_depth: float = 0.15
    wave_amplitudes: dict = field(default_factory=lambda: dict(DEFAULT_AMPLITUDES))
    wave_widths: dict = field(default_factory=lambda: dict(DEFAULT_WIDTHS))
    wave_offsets: dict = field(default_factory=lambda: dict(DEFAULT_OFFSETS))
    duration: float = 60.0
    fs: int = 500
    rr_correlation: str = "white"
    seed: int = 0
    noise_std: float = 0.0

    def validate(self):
        if not 30 <= self.mean_hr <= 180:
            raise ValueError(f"mean_hr {self.mean_hr} outside [30, 180]")
        if self.duration * self.mean_hr / 60.0 < 2:
            raise ValueError("duration too short for two beats")
        if self.fs <= 0 or int(self.fs) != self.fs:
            raise ValueError("fs must be a positive integer")
        if self.sdnn_target < 0 or self.respiration_depth < 0 or self.noise_std < 0:
            raise ValueError("sdnn_target, respiration_depth and noise_std must be >= 0")
        if self.rr_correlation not in RR_MODELS:
            raise ValueError(f"rr_correlation must be one of {RR_MODELS}")
        for name in WAVES:
            for table in (self.wave_amplitudes, self.wave_widths, self.wave_offsets):
                if name not in table or not np.isfinite(table[name]):
                    raise ValueError(f"wave parameter for {name} missing or non-finite")
            if self.wave_widths[name] <= 0:
                raise ValueError(f"width of {name} must be positive")


@dataclass
class GroundTruth:
    r_times: np.ndarray
    fiducials: FiducialSet
    rr_ms: np.ndarray
    breathing_rate: float
    params: SynthParams | None = None


def _unit_noise(rng, n, model):
    if model == "white":
        return rng.standard_normal(n)
    if model == "pink":
        return pink_noise(n, rng)
    # alternating: +/- alternation plus a little white noise
    alt = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return alt + 0.05 * rng.standard_normal(n)


def pink_noise(n, rng, exponent=1.0):
    """Spectrally synthesised noise with power spectrum ~ 1/f**exponent."""
    nfft = max(n, 2)
    freqs = np.fft.rfftfreq(nfft)
    amp = np.zeros_like(freqs)
    amp[1:] = freqs[1:] ** (-exponent / 2.0)
    phases = rng.uniform(0, 2 * np.pi, freqs.size)
    spec = amp * np.exp(1j * phases)
    x = np.fft.irfft(spec, nfft)[:n]
    return x


def _rr_sequence(p: SynthParams, rng):
    mean_rr = 60000.0 / p.mean_hr
    n_beats = int(np.floor(p.duration * p.mean_hr / 60.0))
    n_rr = max(n_beats + 4, 4)
    z = _unit_noise(rng, n_rr, p.rr_correlation)
    z = z - z.mean()
    sd = z.std(ddof=1)
    z = z / sd if sd > 0 else z
    rr = mean_rr + p.sdnn_target * z
    return np.clip(rr, 0.35 * mean_rr, 1.8 * mean_rr)


def synth_record(params: SynthParams, record_id="synth"):
    """Generate ``(EcgRecord, GroundTruth)``; identical params give identical output."""
    params.validate()
    p = params
    rng = np.random.default_rng(p.seed)
    fs = int(p.fs)
    n = int(round(p.duration * fs))
    rr = _rr_sequence(p, rng)
    first = 0.5 * 60000.0 / p.mean_hr
    t_r = first + np.concatenate([[0.0], np.cumsum(rr)])  # ms
    margin_ms = 1000.0 * n / fs - 1.0
    t_r = t_r[t_r < margin_ms]
    r_idx = np.round(t_r * fs / 1000.0).astype(int)

    t_ms = np.arange(n) * 1000.0 / fs
    x = np.zeros(n)
    resp_phase = rng.uniform(0, 2 * np.pi)
    r_scale = 1.0 + p.respiration_depth * np.sin(2 * np.pi * p.respiration_hz * t_r / 1000.0
                                                 + resp_phase)
    fid = {k: [] for k in ("p_on", "p_peak", "p_off", "q", "r", "s", "t_peak", "t_off")}
    for i, tr in enumerate(t_r):
        for w in WAVES:
            amp = p.wave_amplitudes[w]
            if w == "R":
                amp = amp * r_scale[i]
            if amp == 0:
                continue
            c = tr + p.wave_offsets[w]
            sd = p.wave_widths[w]
            lo = np.searchsorted(t_ms, c - 6 * sd)
            hi = np.searchsorted(t_ms, c + 6 * sd)
            seg = t_ms[lo:hi]
            x[lo:hi] += amp * np.exp(-0.5 * ((seg - c) / sd) ** 2)

        def at(ms):
            k = int(round(ms * fs / 1000.0))
            return k if 0 <= k < n else None

        has_p = p.wave_amplitudes["P"] != 0
        has_t = p.wave_amplitudes["T"] != 0
        pc, ps = tr + p.wave_offsets["P"], p.wave_widths["P"]
        tc, tsd = tr + p.wave_offsets["T"], p.wave_widths["T"]
        fid["p_on"].append(at(pc - EDGE_WIDTHS * ps) if has_p else None)
        fid["p_peak"].append(at(pc) if has_p else None)
        fid["p_off"].append(at(pc + EDGE_WIDTHS * ps) if has_p else None)
        fid["q"].append(at(tr + p.wave_offsets["Q"]) if p.wave_amplitudes["Q"] else None)
        fid["r"].append(int(r_idx[i]))
        fid["s"].append(at(tr + p.wave_offsets["S"]) if p.wave_amplitudes["S"] else None)
        fid["t_peak"].append(at(tc) if has_t else None)
        fid["t_off"].append(at(tc + EDGE_WIDTHS * tsd) if has_t else None)

    if p.noise_std > 0:
        x = x + p.noise_std * rng.standard_normal(n)
    rec = EcgRecord(record_id, x, fs, "II")
    gt = GroundTruth(
        r_times=r_idx,
        fiducials=FiducialSet(**{k: v for k, v in fid.items()}),
        rr_ms=np.diff(t_r),
        breathing_rate=60.0 * p.respiration_hz,
        params=p,
    )
    return rec, gt


def snr_noise_std(params: SynthParams, snr_db: float) -> float:
    """Noise standard deviation that gives the requested SNR for a clean record."""
    clean, _ = synth_record(replace(params, noise_std=0.0))
    power = float(np.mean(clean.samples ** 2))
    return float(np.sqrt(power / 10 ** (snr_db / 10.0)))


# ---------------------------------------------------------------- cohorts

def default_trend_spec(duration=330.0, fs=500):
    """Per-group parameters encoding the age trends the cohort should carry.

    Breathing rate falls and P-wave amplitude rises with age group; every
    other parameter is held constant so these two are the only signals.
    """
    spec = {}
    for g in range(N_GROUPS):
        frac = g / (N_GROUPS - 1)
        amps = dict(DEFAULT_AMPLITUDES)
        amps["P"] = 0.10 + 0.12 * frac
        spec[g] = SynthParams(
            mean_hr=65.0,
            sdnn_target=40.0,
            respiration_hz=0.32 - 0.16 * frac,
            respiration_depth=0.15,
            wave_amplitudes=amps,
            duration=duration,
            fs=fs,
            rr_correlation="pink",
            noise_std=0.01,
        )
    return spec


# jitter applies to these fields and to the wave amplitudes
_JITTERED = ("mean_hr", "sdnn_target", "respiration_hz", "respiration_depth")


def jitter_params(p: SynthParams, rng, frac=0.05) -> SynthParams:
    changes = {k: getattr(p, k) * (1 + rng.uniform(-frac, frac)) for k in _JITTERED}
    changes["wave_amplitudes"] = {
        w: a * (1 + rng.uniform(-frac, frac)) for w, a in p.wave_amplitudes.items()}
    return replace(p, **changes)


@dataclass(frozen=True)
class CohortMember:
    record_id: str
    group: int
    age: int
    params: SynthParams


def plan_cohort(trend_spec, n_per_group, seed=0, jitter=0.05):
    """Draw per-record parameters without synthesising any waveform."""
    missing = [g for g in range(N_GROUPS) if g not in trend_spec]
    if missing:
        raise ValueError(f"trend_spec lacks age groups {missing}")
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(N_GROUPS)
    members = []
    for g in range(N_GROUPS):
        rng = np.random.default_rng(children[g])
        ag = AGE_GROUPS[g]
        for j in range(n_per_group):
            p = jitter_params(trend_spec[g], rng, jitter)
            p = replace(p, seed=int(rng.integers(0, 2**31 - 1)))
            age = int(rng.integers(ag.lo, ag.hi + 1))
            members.append(CohortMember(f"g{g:02d}_{j:03d}", g, age, p))
    return members


def synth_cohort(trend_spec=None, n_per_group=10, seed=0, jitter=0.05):
    """Generate a full cohort in memory: ``(records, ground_truth_by_id)``.

    Records carry their age group. For large cohorts prefer ``plan_cohort``
    followed by ``synth_record`` per member, which keeps memory flat.
    """
    from .signal_io import AGE_GROUPS as groups
    trend_spec = default_trend_spec() if trend_spec is None else trend_spec
    records, truth = [], {}
    for m in plan_cohort(trend_spec, n_per_group, seed, jitter):
        rec, gt = synth_record(m.params, m.record_id)
        records.append(replace(rec, age_group=groups[m.group]))
        truth[m.record_id] = gt
    return records, truth


# ---------------------------------------------------------------- trend spec CSV

def _flat(p: SynthParams):
    row = {k: v for k, v in asdict(p).items()
           if k not in ("wave_amplitudes", "wave_widths", "wave_offsets")}
    for w in WAVES:
        row[f"amp_{w}"] = p.wave_amplitudes[w]
        row[f"width_{w}"] = p.wave_widths[w]
        row[f"offset_{w}"] = p.wave_offsets[w]
    return row


def write_trend_spec(path, spec, header_comment=None):
    rows = [dict(group=g, **_flat(spec[g])) for g in sorted(spec)]
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_trend_spec(path):
    spec = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            g = int(row.pop("group"))
            amps, widths, offs = {}, {}, {}
            for w in WAVES:
                amps[w] = float(row.pop(f"amp_{w}"))
                widths[w] = float(row.pop(f"width_{w}"))
                offs[w] = float(row.pop(f"offset_{w}"))
            kw = {}
            for k, v in row.items():
                if k in ("fs", "seed"):
                    kw[k] = int(v)
                elif k == "rr_correlation":
                    kw[k] = v
                else:
                    kw[k] = float(v)
            spec[g] = SynthParams(wave_amplitudes=amps, wave_widths=widths,
                                  wave_offsets=offs, **kw)
    return spec
