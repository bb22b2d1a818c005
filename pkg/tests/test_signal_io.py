import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecg_aging import signal_io as sio


def test_wfdb16_gain_example(tmp_path):
    hea = sio.write_wfdb16(tmp_path, "r1", np.array([2.0, 0.0, -1.0]), fs=1000, gain=200.0)
    rec = sio.read_record(hea)
    # raw 400 at gain 200, baseline 0 -> 2.0 mV
    raw = np.fromfile(tmp_path / "r1.dat", dtype="<i2")
    assert raw[0] == 400
    assert rec.samples[0] == 2.0
    assert rec.fs == 1000


def test_wfdb16_baseline(tmp_path):
    hea = sio.write_wfdb16(tmp_path, "r2", np.array([1.5, -0.25]), fs=500, gain=100.0,
                           baseline=-12)
    rec = sio.read_record(hea)
    np.testing.assert_array_equal(rec.samples, [1.5, -0.25])


def test_wfdb16_matches_reference_reader(tmp_path):
    wfdb = pytest.importorskip("wfdb")
    rng = np.random.default_rng(3)
    x = np.round(rng.normal(0, 0.5, 2000), 3)
    sio.write_wfdb16(tmp_path, "ref", x, fs=1000, gain=1000.0, baseline=7)
    ours = sio.read_record(tmp_path / "ref.hea")
    theirs = wfdb.rdrecord(str(tmp_path / "ref"))
    assert theirs.fs == ours.fs
    np.testing.assert_array_equal(ours.samples, theirs.p_signal[:, 0])
    digital = wfdb.rdrecord(str(tmp_path / "ref"), physical=False).d_signal[:, 0]
    np.testing.assert_array_equal(np.fromfile(tmp_path / "ref.dat", dtype="<i2"), digital)


def test_wfdb16_length_mismatch(tmp_path):
    hea = sio.write_wfdb16(tmp_path, "bad", np.zeros(10), fs=100)
    text = hea.read_text().replace("bad 1 100 10", "bad 1 100 12")
    hea.write_text(text)
    with pytest.raises(sio.RecordError, match="declares 12"):
        sio.read_record(hea)


def test_wfdb16_unsupported_format(tmp_path):
    hea = sio.write_wfdb16(tmp_path, "f212", np.zeros(10), fs=100)
    hea.write_text(hea.read_text().replace("f212.dat 16", "f212.dat 212"))
    with pytest.raises(sio.RecordError):
        sio.read_record(hea)


def test_wfdb16_malformed_header(tmp_path):
    (tmp_path / "m.hea").write_text("m\n")
    with pytest.raises(sio.RecordError):
        sio.read_record(tmp_path / "m.hea")


def test_csv_record(tmp_path):
    p = tmp_path / "r.csv"
    rec = sio.EcgRecord("r", np.linspace(-1, 1, 250), 1000)
    sio.write_csv_record(p, rec)
    back = sio.read_record(p, "csv", fs=1000)
    assert back.samples.size == 250
    np.testing.assert_allclose(back.samples, rec.samples, atol=5e-7)


def test_csv_needs_fs(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("1\n2\n")
    with pytest.raises(sio.RecordError):
        sio.read_record(p, "csv")


def test_unknown_format(tmp_path):
    with pytest.raises(sio.RecordError):
        sio.read_record(tmp_path / "x", "edf")


def test_resample_length_and_dc():
    rec = sio.EcgRecord("c", np.full(10000, 0.7), 1000)
    out = sio.resample(rec, 100)
    assert out.fs == 100 and out.samples.size == 1000
    np.testing.assert_allclose(out.samples, 0.7, atol=1e-9)


def test_resample_sinusoid_amplitude():
    t = np.arange(10000) / 1000.0
    rec = sio.EcgRecord("s", np.sin(2 * np.pi * 5 * t), 1000)
    out = sio.resample(rec, 100)
    t100 = np.arange(out.samples.size) / 100.0
    ref = np.sin(2 * np.pi * 5 * t100)
    inner = slice(50, -50)
    assert np.max(np.abs(out.samples[inner] - ref[inner])) < 0.01


def test_resample_non_integer_ratio():
    rec = sio.EcgRecord("s", np.zeros(1000), 250)
    with pytest.raises(ValueError, match="not an integer"):
        sio.resample(rec, 100)


@given(st.integers(1, 3000), st.sampled_from([(1000, 100), (500, 100), (200, 100), (100, 100)]))
@settings(max_examples=40, deadline=None)
def test_resample_length_property(n, rates):
    fs, target = rates
    rec = sio.EcgRecord("x", np.zeros(n), fs)
    once = sio.resample(rec, target)
    assert once.samples.size == -(-n * target // fs)
    assert sio.resample(once, target).samples.size == once.samples.size


def test_impute_examples():
    r = sio.impute_missing(sio.EcgRecord("a", [1.0, np.nan, 3.0], 100))
    np.testing.assert_array_equal(r.samples, [1, 2, 3])
    r = sio.impute_missing(sio.EcgRecord("b", [np.nan, np.nan, 5.0], 100))
    np.testing.assert_array_equal(r.samples, [5, 5, 5])
    clean = sio.EcgRecord("c", [1.0, 2.0], 100)
    assert sio.impute_missing(clean) is clean


def test_impute_all_missing():
    with pytest.raises(ValueError):
        sio.impute_missing(sio.EcgRecord("a", [np.nan, np.inf], 100))


@given(st.lists(st.one_of(st.floats(-10, 10), st.just(float("nan")), st.just(float("inf"))),
                min_size=1, max_size=60))
def test_impute_property(values):
    x = np.array(values)
    if not np.isfinite(x).any():
        return
    out = sio.impute_missing(sio.EcgRecord("p", x, 100)).samples
    assert np.isfinite(out).all()
    fin = np.isfinite(x)
    np.testing.assert_array_equal(out[fin], x[fin])


@pytest.mark.parametrize("age,idx", [(18, 0), (19, 0), (22, 1), (20, 1), (24, 1), (25, 2),
                                     (84, 13), (85, 14), (92, 14)])
def test_age_groups(age, idx):
    assert sio.age_to_group(age).index == idx


@given(st.floats(18, 92.99))
def test_age_mapping_total(age):
    g = sio.age_to_group(age)
    assert g.lo <= int(age) <= g.hi


@pytest.mark.parametrize("age", [17.9, 93, -1, float("nan")])
def test_age_out_of_range(age):
    with pytest.raises(ValueError):
        sio.age_to_group(age)


def test_group_table():
    assert len(sio.AGE_GROUPS) == 15
    assert (sio.AGE_GROUPS[0].lo, sio.AGE_GROUPS[0].hi) == (18, 19)
    assert (sio.AGE_GROUPS[14].lo, sio.AGE_GROUPS[14].hi) == (85, 92)
    for a, b in zip(sio.AGE_GROUPS[1:13], sio.AGE_GROUPS[2:14]):
        assert b.lo == a.hi + 1 and a.hi - a.lo == 4


def _manifest(tmp_path, rows):
    for rid, age in rows:
        sio.write_wfdb16(tmp_path, rid, np.zeros(100), fs=100)
    p = tmp_path / "manifest.csv"
    sio.write_manifest(p, [dict(record_id=rid, path=f"{rid}.hea", format="wfdb16", fs=100,
                                age=age) for rid, age in rows], header_comment="test")
    return p


def test_load_cohort(tmp_path):
    p = _manifest(tmp_path, [("a", 22), ("b", 18), ("c", "")])
    cohort = sio.load_cohort(p)
    assert [r.record_id for r in cohort.records] == ["a", "b"]
    assert cohort.labels().tolist() == [1, 0]
    assert cohort.excluded == ["c"]


def test_manifest_duplicate(tmp_path):
    p = _manifest(tmp_path, [("a", 22)])
    p.write_text(p.read_text() + "a,a.hea,wfdb16,100,30\n")
    with pytest.raises(sio.RecordError, match="duplicate"):
        sio.read_manifest(p)


def test_manifest_unreadable(tmp_path):
    with pytest.raises(sio.RecordError):
        sio.read_manifest(tmp_path / "none.csv")
