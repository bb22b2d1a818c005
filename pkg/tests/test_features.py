import math
import statistics
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecg_aging import features as F
from ecg_aging import synthgen as sg
from ecg_aging.beatdetect import delineate_fiducials, detect_rpeaks

rr_lists = st.lists(st.floats(300, 2000), min_size=3, max_size=200)


def _oracle_td(rr):
    """Definitions evaluated with the statistics module, no numpy."""
    d = [b - a for a, b in zip(rr, rr[1:])]
    med = statistics.median(rr)
    return {
        "SDNN": statistics.stdev(rr),
        "RMSSD": math.sqrt(sum(x * x for x in d) / len(d)),
        "pNN20": 100.0 * sum(abs(x) > 20 for x in d) / len(d),
        "pNN50": 100.0 * sum(abs(x) > 50 for x in d) / len(d),
        "MCVNN": statistics.median([abs(r - med) for r in rr]) / med,
    }


def test_nn_intervals():
    nn = F.nn_intervals([0, 100, 200], 100)
    np.testing.assert_array_equal(nn.rr_ms, [1000, 1000])
    nn = F.nn_intervals([0, 100, 350, 450, 550], 100)
    assert nn.n_removed == 1 and nn.rr_ms.tolist() == [1000, 1000, 1000]
    with pytest.raises(ValueError):
        F.nn_intervals([0, 300], 100)


def test_nn_from_synth():
    rec, _ = sg.synth_record(sg.SynthParams(mean_hr=60, sdnn_target=20, duration=120))
    nn = F.nn_intervals(detect_rpeaks(rec), rec.fs)
    assert abs(nn.rr_ms.mean() - 1000) < 10


def test_time_domain_constant():
    td = F.time_domain_hrv(F.NnSeries.from_rr([800] * 4))
    assert td["SDNN"] == td["RMSSD"] == td["pNN20"] == td["MCVNN"] == 0


def test_time_domain_hand_example():
    td = F.time_domain_hrv(F.NnSeries.from_rr([800, 850, 800, 850]))
    assert td["RMSSD"] == pytest.approx(50, abs=1e-6)
    assert td["pNN20"] == 100 and td["pNN50"] == 0
    assert td["SDNN"] == pytest.approx(28.8675134595, abs=1e-6)
    assert td["MCVNN"] == pytest.approx(0.0303030303, abs=1e-6)


@given(rr_lists)
def test_time_domain_oracle(rr):
    td = F.time_domain_hrv(F.NnSeries.from_rr(rr))
    ref = _oracle_td(rr)
    for k, v in ref.items():
        assert td[k] == pytest.approx(v, rel=1e-9, abs=1e-9)
    assert td["pNN50"] <= td["pNN20"]


def test_sdann_constant_is_zero():
    nn = F.NnSeries.from_rr([750.0] * 800)   # 10 minutes
    td = F.time_domain_hrv(nn)
    assert td["SDANN5"] == 0 and td["SDANN1"] == 0


def test_sdann_mean_of_segment_sd():
    rng = np.random.default_rng(0)
    a, b = rng.normal(1000, 30, 300), rng.normal(1000, 60, 300)
    # pin each half to exactly 300 s so the segments are the two halves
    a += (300000 - a.sum()) / a.size
    b += (300000 - b.sum()) / b.size
    nn = F.NnSeries.from_rr(np.r_[a, b])
    expected = (np.std(a, ddof=1) + np.std(b, ddof=1)) / 2
    assert F.sdann(nn, 5) == pytest.approx(expected, rel=1e-12)
    assert F.sdann_classic(nn, 5) == pytest.approx(abs(a.mean() - b.mean()) / math.sqrt(2))


def test_sdann_short_absent():
    assert math.isnan(F.time_domain_hrv(F.NnSeries.from_rr([800] * 100))["SDANN5"])


@given(rr_lists, st.floats(0.5, 2.0))
def test_scaling(rr, c):
    a = F.time_domain_hrv(F.NnSeries.from_rr(rr))
    b = F.time_domain_hrv(F.NnSeries.from_rr(np.asarray(rr) * c))
    assert b["SDNN"] == pytest.approx(c * a["SDNN"], rel=1e-9, abs=1e-9)
    assert b["RMSSD"] == pytest.approx(c * a["RMSSD"], rel=1e-9, abs=1e-9)
    assert b["MCVNN"] == pytest.approx(a["MCVNN"], rel=1e-9, abs=1e-12)


def test_pnn_not_scale_invariant():
    rr = [800, 830, 800, 830]
    a = F.time_domain_hrv(F.NnSeries.from_rr(rr))
    b = F.time_domain_hrv(F.NnSeries.from_rr(np.asarray(rr) * 0.5))
    assert a["pNN20"] == 100 and b["pNN20"] == 0


def test_duplicated_halves():
    half = [800.0, 850.0] * 100
    a = F.NnSeries.from_rr(half)
    b = F.NnSeries.from_rr(half * 2)
    ta, tb = F.time_domain_hrv(a), F.time_domain_hrv(b)
    for k in ("RMSSD", "pNN20", "pNN50", "MCVNN"):
        assert tb[k] == pytest.approx(ta[k], abs=1e-9)
    # sample SD: identical up to the Bessel factor
    n = len(half)
    assert tb["SDNN"] == pytest.approx(ta["SDNN"] * math.sqrt((n - 1) * 2 / (2 * n - 1)),
                                       abs=1e-9)
    assert F.fragmentation_pas(b) == F.fragmentation_pas(a) == 100


def _dfa_mean(make, seeds=20):
    out = []
    for s in range(seeds):
        rng = np.random.default_rng(s)
        out.append(F.dfa_alpha(F.NnSeries.from_rr(make(rng)))["alpha1"])
    return float(np.mean(out))


def test_dfa_white():
    assert _dfa_mean(lambda r: 800 + 20 * r.standard_normal(5000)) == pytest.approx(0.5,
                                                                                    abs=0.05)


def test_dfa_integrated():
    def make(r):
        x = np.cumsum(r.standard_normal(5000))
        return 800 + (x - x.min()) + 1
    assert _dfa_mean(make) == pytest.approx(1.5, abs=0.1)


def test_dfa_pink():
    def make(r):
        x = sg.pink_noise(5000, r)
        return 800 + 20 * x / x.std()
    assert _dfa_mean(make) == pytest.approx(1.0, abs=0.1)


def test_dfa_lengths():
    nn = F.NnSeries.from_rr(800 + np.random.default_rng(0).normal(0, 10, 200))
    out = F.dfa_alpha(nn)
    assert math.isfinite(out["alpha1"]) and math.isnan(out["alpha2"])
    assert all(math.isnan(v) for v in F.dfa_alpha(F.NnSeries.from_rr([800] * 50)).values())


def _tachogram(f_mod, n=600):
    t, rr = 0.0, []
    while len(rr) < n:
        v = 900 + 40 * math.sin(2 * math.pi * f_mod * t / 1000)
        rr.append(v)
        t += v
    return F.NnSeries.from_rr(rr)


def test_freq_hf():
    f = F.freq_domain_hrv(_tachogram(0.25))
    assert f["HF"] / (f["LF"] + f["HF"]) >= 0.9


def test_freq_lf():
    f = F.freq_domain_hrv(_tachogram(0.08))
    assert f["LF"] / (f["LF"] + f["HF"]) >= 0.9


def test_freq_constant():
    nn = F.NnSeries.from_rr([900.0] * 300)
    f = F.freq_domain_hrv(nn)
    tot = F.total_power(_tachogram(0.25))
    assert f["LF"] <= 1e-6 * tot and f["HF"] <= 1e-6 * tot


def test_freq_short():
    assert math.isnan(F.freq_domain_hrv(F.NnSeries.from_rr([900.0] * 100))["LF"])


@pytest.mark.parametrize("rr,pas", [([800, 850] * 3, 100), (list(range(800, 810)), 0),
                                    ([800] * 10, 0)])
def test_pas_examples(rr, pas):
    assert F.fragmentation_pas(F.NnSeries.from_rr(rr)) == pas


def test_pas_short_run():
    # 3 alternating differences followed by a monotone stretch: run too short
    rr = [800, 850, 800, 850, 860, 870, 880, 890]
    assert F.fragmentation_pas(F.NnSeries.from_rr(rr)) == 0


@given(rr_lists)
def test_pas_range(rr):
    assert 0 <= F.fragmentation_pas(F.NnSeries.from_rr(rr)) <= 100


@pytest.mark.parametrize("hz,bpm", [(0.25, 15), (0.20, 12)])
def test_edr_rate(hz, bpm):
    rec, gt = sg.synth_record(sg.SynthParams(respiration_hz=hz, duration=180, seed=3))
    out = F.edr_breathing(rec, gt.r_times)
    assert out["breathing_rate_bpm"] == pytest.approx(bpm, abs=1)
    assert out["breathing_signal_power"] > 0


def test_edr_no_modulation():
    rec, gt = sg.synth_record(sg.SynthParams(respiration_depth=0, duration=180, seed=3))
    out = F.edr_breathing(rec, gt.r_times)
    assert math.isnan(out["breathing_rate_bpm"])
    assert out["breathing_signal_power"] >= 0


def test_sr_heart_rate_and_p():
    p = sg.SynthParams(mean_hr=60, sdnn_target=0, duration=30, seed=0)
    rec, gt = sg.synth_record(p)
    rows = F.sr_beat_features(rec, delineate_fiducials(rec, gt.r_times))
    hr = rows["hr_bpm"][:-1]
    np.testing.assert_allclose(hr, 60, atol=0.1)
    pm = rows["p_mV"][1:]
    assert np.all(np.abs(pm - 0.15) <= 0.02)


def test_sr_absent_t():
    amps = dict(sg.DEFAULT_AMPLITUDES, T=0.0)
    rec, gt = sg.synth_record(sg.SynthParams(duration=20, wave_amplitudes=amps))
    rows = F.sr_beat_features(rec, delineate_fiducials(rec, gt.r_times))
    assert np.isnan(rows["t_mV"]).all()


def test_feature_vector_constant_rr():
    rec, _ = sg.synth_record(sg.SynthParams(sdnn_target=0, mean_hr=60, duration=60))
    fv = F.record_feature_vector(rec)
    assert fv["HRV_SDNN"] < 1.0      # only sample-grid rounding remains
    assert fv["HRV_pNN20"] == 0
    assert fv["SR_hr_bpm"] == pytest.approx(60000 / fv["SR_rr_mean_ms"])
    assert list(fv.values)[:len(F.FEATURE_NAMES)] == list(F.FEATURE_NAMES)


def test_feature_vector_exact_constant_rr():
    # 500 Hz and 60 bpm: every beat lands on the sample grid
    rec, gt = sg.synth_record(sg.SynthParams(sdnn_target=0, mean_hr=60, duration=60))
    assert np.ptp(np.diff(gt.r_times)) == 0
    fv = F.record_feature_vector(rec, gt.r_times)
    assert fv["HRV_SDNN"] == 0 and fv["HRV_pNN20"] == 0


def test_feature_vector_time_shift():
    p = sg.SynthParams(duration=150, seed=4)
    rec, gt = sg.synth_record(p)
    shift = 137
    shifted = replace(rec, samples=np.r_[np.zeros(shift), rec.samples])
    a = F.record_feature_vector(rec, gt.r_times)
    b = F.record_feature_vector(shifted, gt.r_times + shift)
    for k in F.FEATURE_NAMES:
        va, vb = a[k], b[k]
        assert (math.isnan(va) and math.isnan(vb)) or vb == pytest.approx(va, rel=1e-9,
                                                                           abs=1e-12), k


def test_feature_invariants_on_synth():
    rec, _ = sg.synth_record(sg.SynthParams(duration=330, seed=9, noise_std=0.01))
    fv = F.record_feature_vector(rec)
    for k in ("HRV_pNN20", "HRV_pNN50", "HRV_PAS"):
        assert 0 <= fv[k] <= 100
    for k in ("HRV_LF", "HRV_HF", "HRV_breathing_signal_power"):
        assert fv[k] >= 0
    assert math.isfinite(fv["HRV_alpha1"]) and math.isfinite(fv["HRV_alpha2"])


def test_cohort_breathing_trend():
    spec = {g: replace(p, duration=120) for g, p in sg.default_trend_spec().items()}
    means = []
    for g in range(15):
        vals = []
        for m in sg.plan_cohort({k: spec[k] for k in spec}, 6, seed=0):
            if m.group != g:
                continue
            rec, gt = sg.synth_record(m.params)
            vals.append(F.edr_breathing(rec, gt.r_times)["breathing_rate_bpm"])
        means.append(np.nanmean(vals))
    assert np.all(np.diff(means) < 0), means


def test_feature_table_roundtrip(tmp_path):
    v = F.FeatureVector("r1", {n: float(i) for i, n in enumerate(F.FEATURE_NAMES)})
    w = F.FeatureVector("r2", {n: math.nan for n in F.FEATURE_NAMES})
    F.write_feature_table(tmp_path / "f.csv", [v, w], header_comment="h")
    ids, names, X = F.read_feature_table(tmp_path / "f.csv")
    assert ids == ["r1", "r2"] and tuple(names) == F.FEATURE_NAMES
    np.testing.assert_array_equal(X[0], np.arange(len(F.FEATURE_NAMES)))
    assert np.isnan(X[1]).all()
