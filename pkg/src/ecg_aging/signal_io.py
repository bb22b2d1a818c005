"""Reading, resampling and cleaning single-lead ECG records.

Two on-disk formats are supported: WFDB format 16 (header + interleaved
little-endian int16 signal file) and a plain CSV with one amplitude per row.
Cohorts are described by a manifest CSV with header
``record_id,path,format,fs,age``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal as ss

log = logging.getLogger(__name__)

N_GROUPS = 15
MANIFEST_COLUMNS = ("record_id", "path", "format", "fs", "age")


class RecordError(ValueError):
    """Raised for malformed or unsupported record files."""


@dataclass(frozen=True)
class AgeGroup:
    index: int
    lo: int
    hi: int

    @property
    def label(self) -> str:
        return f"{self.lo}-{self.hi}"


def _build_groups():
    groups = [AgeGroup(0, 18, 19)]
    for i in range(1, 14):
        lo = 20 + 5 * (i - 1)
        groups.append(AgeGroup(i, lo, lo + 4))
    groups.append(AgeGroup(14, 85, 92))
    return tuple(groups)


AGE_GROUPS = _build_groups()


def age_to_group(age: float) -> AgeGroup:
    """Map an age in years onto one of the 15 dataset age groups.

    Fractional ages are floored. Ages outside 18-92 raise ``ValueError``.
    """
    if age is None or not math.isfinite(age):
        raise ValueError(f"age must be finite, got {age!r}")
    years = int(math.floor(age))
    if years < 18 or years > 92:
        raise ValueError(f"age {age} outside the supported range 18-92")
    for g in AGE_GROUPS:
        if g.lo <= years <= g.hi:
            return g
    raise AssertionError("unreachable")  # pragma: no cover


@dataclass(frozen=True)
class EcgRecord:
    record_id: str
    samples: np.ndarray
    fs: int
    lead: str = "II"
    age_group: AgeGroup | None = None

    def __post_init__(self):
        if int(self.fs) != self.fs or self.fs <= 0:
            raise ValueError(f"fs must be a positive integer, got {self.fs}")
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("samples must be a non-empty 1-D sequence")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "fs", int(self.fs))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs


@dataclass
class Cohort:
    records: list
    manifest_path: str = ""
    excluded: list = field(default_factory=list)

    def __post_init__(self):
        ids = [r.record_id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ValueError("record_ids in a cohort must be unique")

    def __len__(self):
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.age_group.index for r in self.records], dtype=int)


# ---------------------------------------------------------------- WFDB

def _parse_gain_field(token: str):
    # "200(0)/mV", "200/mV", "200(-12)", "200"
    units = "mV"
    if "/" in token:
        token, units = token.split("/", 1)
    baseline = None
    if "(" in token:
        token, rest = token.split("(", 1)
        baseline = int(rest.rstrip(")"))
    gain = float(token)
    return gain, baseline, units


def read_wfdb_header(path) -> dict:
    path = Path(path)
    lines = []
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            lines.append(line)
    if not lines:
        raise RecordError(f"{path}: empty header")
    head = lines[0].split()
    if len(head) < 2:
        raise RecordError(f"{path}: malformed record line {lines[0]!r}")
    if "/" in head[0]:
        raise RecordError(f"{path}: multi-segment records are not supported")
    try:
        nsig = int(head[1])
        fs_tok = head[2] if len(head) > 2 else "250"
        fs = float(fs_tok.split("/")[0].split("(")[0])
        nsamp = int(head[3]) if len(head) > 3 else None
    except (ValueError, IndexError) as exc:
        raise RecordError(f"{path}: malformed record line {lines[0]!r}") from exc
    if nsig < 1 or nsig > 2:
        raise RecordError(f"{path}: only single/dual-signal records supported, got {nsig}")
    if len(lines) < 1 + nsig:
        raise RecordError(f"{path}: header declares {nsig} signals but lists {len(lines) - 1}")
    signals = []
    for line in lines[1:1 + nsig]:
        tok = line.split()
        if len(tok) < 2:
            raise RecordError(f"{path}: malformed signal line {line!r}")
        fname, fmt = tok[0], tok[1]
        if "x" in fmt or ":" in fmt or "+" in fmt:
            raise RecordError(f"{path}: unsupported format spec {fmt!r}")
        if fmt != "16":
            raise RecordError(f"{path}: unsupported format code {fmt!r} (only 16)")
        gain, baseline, units = 200.0, None, "mV"
        if len(tok) > 2:
            try:
                gain, baseline, units = _parse_gain_field(tok[2])
            except ValueError as exc:
                raise RecordError(f"{path}: malformed gain field {tok[2]!r}") from exc
        adczero = int(tok[4]) if len(tok) > 4 else 0
        if baseline is None:
            baseline = adczero
        if gain == 0:
            gain = 200.0
        desc = " ".join(tok[8:]) if len(tok) > 8 else ""
        signals.append({
            "file": fname,
            "fmt": 16,
            "gain": gain,
            "baseline": baseline,
            "units": units,
            "checksum": int(tok[6]) if len(tok) > 6 else None,
            "description": desc,
        })
    if len({s["file"] for s in signals}) != 1:
        raise RecordError(f"{path}: signals spread over several files are not supported")
    return {"name": head[0], "nsig": nsig, "fs": fs, "nsamp": nsamp, "signals": signals}


def read_wfdb16_raw(header_path):
    """Return ``(header, digital)`` where ``digital`` is an (nsamp, nsig) int array."""
    header_path = Path(header_path)
    hdr = read_wfdb_header(header_path)
    dat = header_path.parent / hdr["signals"][0]["file"]
    if not dat.exists():
        raise RecordError(f"signal file {dat} not found")
    raw = np.fromfile(dat, dtype="<i2")
    nsig = hdr["nsig"]
    if raw.size % nsig:
        raise RecordError(f"{dat}: byte count is not a whole number of frames")
    digital = raw.reshape(-1, nsig).astype(np.int64)
    if hdr["nsamp"] is not None and hdr["nsamp"] != digital.shape[0]:
        raise RecordError(
            f"{dat}: header declares {hdr['nsamp']} samples, file holds {digital.shape[0]}")
    return hdr, digital


def _select_lead(hdr, lead):
    descs = [s["description"] for s in hdr["signals"]]
    if lead is None:
        return 0
    if isinstance(lead, int):
        if not 0 <= lead < hdr["nsig"]:
            raise RecordError(f"lead index {lead} out of range")
        return lead
    for i, d in enumerate(descs):
        if d.strip().lower() in (lead.lower(), f"ecg {lead}".lower(), f"lead {lead}".lower()):
            return i
    if hdr["nsig"] == 1:
        return 0
    raise RecordError(f"lead {lead!r} not found among {descs}")


def write_wfdb16(directory, name, samples_mv, fs, gain=200.0, baseline=0, lead="II",
                 comments=()):
    """Write a single-signal format-16 record (used for fixtures and round trips)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digital = np.round(np.asarray(samples_mv, dtype=float) * gain + baseline)
    if np.any(digital > 32767) or np.any(digital < -32768):
        raise ValueError("samples exceed the 16-bit range at this gain")
    digital = digital.astype("<i2")
    digital.tofile(directory / f"{name}.dat")
    checksum = int(digital.astype(np.int64).sum()) & 0xFFFF
    if checksum >= 32768:
        checksum -= 65536
    initval = int(digital[0]) if digital.size else 0
    with open(directory / f"{name}.hea", "w", encoding="ascii") as fh:
        fh.write(f"{name} 1 {fs} {digital.size}\n")
        fh.write(f"{name}.dat 16 {gain:g}({baseline})/mV 16 {baseline} {initval} "
                 f"{checksum} 0 {lead}\n")
        for c in comments:
            fh.write(f"# {c}\n")
    return directory / f"{name}.hea"


def read_record(path, format="wfdb16", fs=None, record_id=None, lead="II") -> EcgRecord:
    """Load one record as millivolts.

    Parameters
    ----------
    path : path-like
        For ``wfdb16`` the ``.hea`` header (the extension may be omitted);
        for ``csv`` a file with one sample per row (optionally a header row,
        optionally a second column when the first is a time stamp).
    format : {"wfdb16", "csv"}
    fs : int, optional
        Sampling rate. Required for CSV; overrides nothing for WFDB unless the
        header and caller disagree, which raises.
    """
    path = Path(path)
    if format == "wfdb16":
        if path.suffix != ".hea":
            path = path.with_suffix(".hea")
        if not path.exists():
            raise FileNotFoundError(path)
        hdr, digital = read_wfdb16_raw(path)
        idx = _select_lead(hdr, lead)
        sig = hdr["signals"][idx]
        samples = (digital[:, idx] - sig["baseline"]) / sig["gain"]
        if sig["units"].lower() in ("uv", "µv"):
            samples = samples / 1000.0
        hdr_fs = hdr["fs"]
        if fs is not None and abs(float(fs) - hdr_fs) > 1e-9:
            raise RecordError(f"{path}: caller fs={fs} disagrees with header fs={hdr_fs}")
        if hdr_fs != int(hdr_fs):
            raise RecordError(f"{path}: non-integer sampling rate {hdr_fs}")
        rid = record_id or hdr["name"]
        lead_label = sig["description"] or str(lead)
        return EcgRecord(rid, samples, int(hdr_fs), lead_label)
    if format == "csv":
        if fs is None:
            raise RecordError("CSV records need an explicit fs")
        if not path.exists():
            raise FileNotFoundError(path)
        samples = _read_csv_samples(path)
        return EcgRecord(record_id or path.stem, samples, int(fs), str(lead))
    raise RecordError(f"unsupported format {format!r}")


def _read_csv_samples(path):
    values = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].startswith("#"):
                continue
            cell = row[-1].strip()
            if cell == "" or cell.lower() == "nan":
                values.append(np.nan)
                continue
            try:
                values.append(float(cell))
            except ValueError:
                if values:
                    raise RecordError(f"{path}: non-numeric value on row {i + 1}")
                # header row
    if not values:
        raise RecordError(f"{path}: no samples")
    return np.asarray(values, dtype=float)


def write_csv_record(path, record: EcgRecord):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("mV\n")
        for v in record.samples:
            fh.write("nan\n" if not np.isfinite(v) else f"{v:.6f}\n")


# ---------------------------------------------------------------- cleaning

def resample(record: EcgRecord, target_fs: int) -> EcgRecord:
    """Integer decimation with a zero-phase anti-alias filter (cutoff 0.45 * target_fs)."""
    if target_fs == record.fs:
        return record
    if target_fs <= 0 or target_fs != int(target_fs) or record.fs % target_fs:
        raise ValueError(
            f"cannot decimate {record.fs} Hz to {target_fs} Hz: ratio is not an integer")
    target_fs = int(target_fs)
    q = record.fs // target_fs
    x = record.samples
    cutoff = 0.45 * target_fs / (record.fs / 2.0)
    sos = ss.butter(8, cutoff, btype="low", output="sos")
    if x.size > 3 * (2 * sos.shape[0] + 1):
        x = ss.sosfiltfilt(sos, x)
    return replace(record, samples=np.ascontiguousarray(x[::q]), fs=target_fs)


def impute_missing(record: EcgRecord) -> EcgRecord:
    x = record.samples
    finite = np.isfinite(x)
    if finite.all():
        return record
    if not finite.any():
        raise ValueError(f"record {record.record_id}: all samples are non-finite")
    idx = np.arange(x.size)
    filled = np.interp(idx, idx[finite], x[finite])
    return replace(record, samples=filled)


# ---------------------------------------------------------------- cohorts

@dataclass(frozen=True)
class ManifestEntry:
    record_id: str
    path: Path
    format: str
    fs: int | None
    age: float
    group: AgeGroup

    def load(self, lead="II") -> EcgRecord:
        rec = read_record(self.path, self.format, fs=self.fs, record_id=self.record_id, lead=lead)
        return replace(rec, age_group=self.group)


def read_manifest(manifest):
    """Parse a manifest CSV without touching the record files.

    Returns ``(entries, excluded_ids)``; rows with an empty age are excluded.
    Relative paths are resolved against the manifest's directory.
    """
    manifest = Path(manifest)
    try:
        fh = open(manifest, newline="")
    except OSError as exc:
        raise RecordError(f"cannot read manifest {manifest}: {exc}") from exc
    with fh:
        reader = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise RecordError(f"manifest {manifest} lacks columns {sorted(missing)}")
        rows = list(reader)
    seen = set()
    entries, excluded = [], []
    for row in rows:
        rid = row["record_id"].strip()
        if rid in seen:
            raise RecordError(f"duplicate record_id {rid!r} in {manifest}")
        seen.add(rid)
        age_txt = (row.get("age") or "").strip()
        if age_txt == "" or age_txt.lower() in ("nan", "na"):
            excluded.append(rid)
            continue
        try:
            age = float(age_txt)
            group = age_to_group(age)
        except ValueError as exc:
            raise RecordError(f"record {rid}: {exc}") from exc
        rpath = Path(row["path"])
        if not rpath.is_absolute():
            rpath = manifest.parent / rpath
        fs = int(float(row["fs"])) if (row.get("fs") or "").strip() else None
        entries.append(ManifestEntry(rid, rpath, row["format"].strip(), fs, age, group))
    if excluded:
        log.info("excluded %d record(s) without age information", len(excluded))
    return entries, excluded


def load_cohort(manifest, lead="II") -> Cohort:
    entries, excluded = read_manifest(manifest)
    records = [e.load(lead) for e in entries]
    return Cohort(records, os.fspath(manifest), excluded)


def write_manifest(path, rows, header_comment=None):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in MANIFEST_COLUMNS])
