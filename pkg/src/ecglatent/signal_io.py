"""ECG record data model, dataset file I/O, and synthetic ECG generation.

Datasets live either in a compact binary container (one file, many
records) or as one CSV per record with a ``.fid`` sidecar of fiducial
indices. Synthetic records are sums of Gaussian bumps (P, QRS, T per
cycle), which gives closed-form oracles for every downstream stage.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ParameterError

MAGIC = b"ECGL"
FORMAT_VERSION = 1

CANONICAL_LEADS = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")


@dataclass
class EcgRecord:
    """A multi-lead ECG signal in microvolts.

    ``signal`` is [num_leads x num_samples] float32; ``fiducials`` is an
    optional list of QRS-onset sample indices.
    """

    id: str
    sample_rate_hz: float
    leads: tuple[str, ...]
    signal: np.ndarray
    fiducials: list[int] | None = None

    def __post_init__(self):
        self.leads = tuple(self.leads)
        self.signal = np.asarray(self.signal, dtype=np.float32)
        if self.signal.ndim != 2:
            raise ParameterError(f"record {self.id!r}: signal must be 2-D")
        if self.sample_rate_hz <= 0:
            raise ParameterError(f"record {self.id!r}: sample_rate_hz must be > 0")
        if self.signal.shape[0] != len(self.leads):
            raise ParameterError(
                f"record {self.id!r}: {len(self.leads)} lead names but "
                f"{self.signal.shape[0]} signal rows"
            )
        if not np.all(np.isfinite(self.signal)):
            raise ParameterError(f"record {self.id!r}: signal contains non-finite values")
        if self.fiducials is not None:
            self.fiducials = [int(i) for i in self.fiducials]
            n = self.signal.shape[1]
            for i in self.fiducials:
                if not 0 <= i < n:
                    raise ParameterError(
                        f"record {self.id!r}: fiducial {i} outside [0, {n})"
                    )

    @property
    def num_samples(self) -> int:
        return self.signal.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate_hz


@dataclass
class WaveParams:
    """One Gaussian bump: amplitude (uV), center within the cycle (ms), width sigma (ms)."""

    amplitude_uv: float
    center_ms: float
    width_ms: float


@dataclass
class SyntheticBeatParams:
    """Parameters of the Gaussian-bump beat generator."""

    p: WaveParams = field(default_factory=lambda: WaveParams(150.0, 200.0, 25.0))
    qrs: WaveParams = field(default_factory=lambda: WaveParams(1000.0, 400.0, 15.0))
    t: WaveParams = field(default_factory=lambda: WaveParams(300.0, 650.0, 50.0))
    heart_rate_bpm: float = 60.0
    noise_std_uv: float = 0.0
    rng_seed: int = 0

    def validate(self):
        for w in (self.p, self.qrs, self.t):
            if w.width_ms <= 0:
                raise ParameterError("wave widths must be > 0")
        if not (self.p.center_ms < self.qrs.center_ms < self.t.center_ms):
            raise ParameterError("wave centers must be ordered P < QRS < T")
        if not 30.0 <= self.heart_rate_bpm <= 220.0:
            raise ParameterError("heart_rate_bpm must be in [30, 220]")
        if self.noise_std_uv < 0:
            raise ParameterError("noise_std_uv must be >= 0")

    @property
    def qrs_onset_ms(self) -> float:
        """QRS onset within the cycle: two sigma before the bump center."""
        return max(0.0, self.qrs.center_ms - 2.0 * self.qrs.width_ms)


def generate_synthetic_ecg(
    params: SyntheticBeatParams,
    duration_s: float,
    sample_rate_hz: float = 1000.0,
    leads: tuple[str, ...] = CANONICAL_LEADS,
    record_id: str = "synthetic",
) -> EcgRecord:
    """Generate a Gaussian-bump beat train with true QRS-onset fiducials.

    Every lead carries the same waveform scaled by a fixed per-lead gain
    (lead 0 has gain 1) plus i.i.d. Gaussian noise. Deterministic given
    ``params.rng_seed``.
    """
    params.validate()
    if duration_s <= 0:
        raise ParameterError("duration_s must be > 0")

    n = int(round(duration_s * sample_rate_hz))
    cycle_ms = 60000.0 / params.heart_rate_bpm
    t_ms = np.arange(n, dtype=np.float64) / sample_rate_hz * 1000.0
    phase = t_ms % cycle_ms

    base = np.zeros(n, dtype=np.float64)
    for w in (params.p, params.qrs, params.t):
        # include neighbours so bumps near the cycle edge wrap cleanly
        for shift in (-cycle_ms, 0.0, cycle_ms):
            base += w.amplitude_uv * np.exp(
                -((phase - w.center_ms - shift) ** 2) / (2.0 * w.width_ms**2)
            )

    nlead = len(leads)
    gains = 1.0 - 0.4 * np.arange(nlead) / max(nlead - 1, 1)
    signal = gains[:, None] * base[None, :]
    if params.noise_std_uv > 0:
        rng = np.random.default_rng(params.rng_seed)
        signal = signal + rng.normal(0.0, params.noise_std_uv, size=signal.shape)

    fiducials = []
    k = 0
    while True:
        onset_ms = k * cycle_ms + params.qrs_onset_ms
        idx = int(round(onset_ms / 1000.0 * sample_rate_hz))
        if idx >= n:
            break
        fiducials.append(idx)
        k += 1

    return EcgRecord(
        id=record_id,
        sample_rate_hz=sample_rate_hz,
        leads=leads,
        signal=signal.astype(np.float32),
        fiducials=fiducials,
    )


def random_beat_params(rng: np.random.Generator, noise_std_uv: float = 0.0) -> SyntheticBeatParams:
    """Draw a morphologically varied but always-valid parameter set."""
    return SyntheticBeatParams(
        p=WaveParams(rng.uniform(50, 250), rng.uniform(160, 230), rng.uniform(15, 35)),
        qrs=WaveParams(rng.uniform(400, 2500), rng.uniform(380, 420), rng.uniform(8, 25)),
        t=WaveParams(rng.uniform(100, 500), rng.uniform(600, 700), rng.uniform(35, 70)),
        heart_rate_bpm=rng.uniform(50, 100),
        noise_std_uv=noise_std_uv,
        rng_seed=int(rng.integers(0, 2**31 - 1)),
    )


# ---------------------------------------------------------------------------
# binary container


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at byte {self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, what: str) -> float:
        return struct.unpack("<d", self.take(8, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(what)
        return self.take(n, what).decode("utf-8")


def write_dataset(records: list[EcgRecord], path: str, fmt: str = "binary") -> None:
    """Write records to ``path``; ``fmt`` is ``binary`` or ``csv``.

    CSV writes one ``<id>.csv`` (+ ``<id>.fid`` sidecar) per record into
    the directory ``path``.
    """
    if fmt == "csv":
        _write_csv_dir(records, path)
        return
    if fmt != "binary":
        raise ParameterError(f"unknown dataset format {fmt!r}")

    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(records))]
    for rec in records:
        chunks.append(_pack_str(rec.id))
        chunks.append(struct.pack("<d", rec.sample_rate_hz))
        chunks.append(struct.pack("<H", len(rec.leads)))
        for name in rec.leads:
            chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", rec.num_samples))
        chunks.append(np.ascontiguousarray(rec.signal, dtype="<f4").tobytes())
        fids = rec.fiducials or []
        chunks.append(struct.pack("<I", len(fids)))
        chunks.append(np.asarray(fids, dtype="<u4").tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def read_dataset(path: str) -> list[EcgRecord]:
    """Read a dataset written by :func:`write_dataset`.

    A directory or a ``.csv`` path is read as the CSV form; anything
    else as the binary container. An empty file yields an empty list.
    """
    if os.path.isdir(path):
        return _read_csv_dir(path)
    if path.endswith(".csv"):
        return [_read_csv_record(path)]

    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) == 0:
        return []
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    version = r.u16("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    count = r.u32("record count")
    records = []
    for _ in range(count):
        rec_id = r.string("record id")
        rate = r.f64(f"sample rate of {rec_id!r}")
        nlead = r.u16(f"lead count of {rec_id!r}")
        leads = tuple(r.string(f"lead name of {rec_id!r}") for _ in range(nlead))
        nsamp = r.u32(f"sample count of {rec_id!r}")
        start = r.pos
        raw = r.take(4 * nlead * nsamp, f"samples of {rec_id!r}")
        signal = np.frombuffer(raw, dtype="<f4").reshape(nlead, nsamp)
        if not np.all(np.isfinite(signal)):
            bad = int(np.flatnonzero(~np.isfinite(signal.ravel()))[0])
            raise FormatError(
                f"{path}: non-finite sample in record {rec_id!r} at byte {start + 4 * bad}"
            )
        nfid = r.u32(f"fiducial count of {rec_id!r}")
        fids = np.frombuffer(r.take(4 * nfid, f"fiducials of {rec_id!r}"), dtype="<u4")
        try:
            records.append(
                EcgRecord(rec_id, rate, leads, signal, list(fids) if nfid else None)
            )
        except ParameterError as e:
            raise FormatError(f"{path}: {e}") from e
    return records


# ---------------------------------------------------------------------------
# CSV form


def _csv_name(rec_id: str) -> str:
    return "".join(c if (c.isalnum() or c in "-_") else "_" for c in rec_id)


def _write_csv_dir(records: list[EcgRecord], dirpath: str) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for rec in records:
        base = os.path.join(dirpath, _csv_name(rec.id))
        tmp = base + ".csv.tmp"
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time_s"] + list(rec.leads))
            # comment row carries id and rate so the CSV form round-trips
            f.write(f"# sample_rate_hz={rec.sample_rate_hz!r} id={rec.id}\n")
            t = np.arange(rec.num_samples) / rec.sample_rate_hz
            for i in range(rec.num_samples):
                w.writerow([f"{t[i]:.9g}"] + [f"{v:.9g}" for v in rec.signal[:, i]])
        os.replace(tmp, base + ".csv")
        if rec.fiducials is not None:
            with open(base + ".fid.tmp", "w") as f:
                f.write("".join(f"{i}\n" for i in rec.fiducials))
            os.replace(base + ".fid.tmp", base + ".fid")


def _read_csv_record(path: str) -> EcgRecord:
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty CSV record")
    header = lines[0].split(",")
    if header[0] != "time_s":
        raise FormatError(f"{path}: line 1: expected 'time_s' header")
    leads = tuple(header[1:])

    rec_id = os.path.splitext(os.path.basename(path))[0]
    rate = None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "id=" in body:
                rec_id = body.split("id=", 1)[1]
            if body.startswith("sample_rate_hz="):
                rate = float(body.split("=", 1)[1].split()[0])
            continue
        vals = line.split(",")
        if len(vals) != len(leads) + 1:
            raise FormatError(f"{path}: line {lineno}: expected {len(leads) + 1} columns")
        try:
            row = [float(v) for v in vals]
        except ValueError as e:
            raise FormatError(f"{path}: line {lineno}: {e}") from e
        if any(not math.isfinite(v) for v in row):
            raise FormatError(
                f"{path}: line {lineno}: non-finite sample in record {rec_id!r}"
            )
        rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no sample rows")
    arr = np.asarray(rows, dtype=np.float64)
    if rate is None:
        dt = np.diff(arr[:, 0])
        rate = 1.0 / float(np.median(dt)) if len(dt) else 1000.0
    signal = arr[:, 1:].T

    fids = None
    fid_path = os.path.splitext(path)[0] + ".fid"
    if os.path.exists(fid_path):
        with open(fid_path) as f:
            fids = [int(line) for line in f.read().split()]
    return EcgRecord(rec_id, rate, leads, signal, fids)


def _read_csv_dir(dirpath: str) -> list[EcgRecord]:
    names = sorted(n for n in os.listdir(dirpath) if n.endswith(".csv"))
    return [_read_csv_record(os.path.join(dirpath, n)) for n in names]


def records_equal(a: EcgRecord, b: EcgRecord, atol_uv: float = 0.0) -> bool:
    """Field equality helper used by round-trip tests."""
    if a.id != b.id or a.leads != b.leads:
        return False
    if not math.isclose(a.sample_rate_hz, b.sample_rate_hz, rel_tol=1e-12):
        return False
    if a.signal.shape != b.signal.shape:
        return False
    if atol_uv == 0.0:
        if not np.array_equal(a.signal, b.signal):
            return False
    elif not np.allclose(a.signal, b.signal, atol=atol_uv, rtol=0):
        return False
    return (a.fiducials or []) == (b.fiducials or [])


__all__ = [
    "EcgRecord",
    "WaveParams",
    "SyntheticBeatParams",
    "generate_synthetic_ecg",
    "random_beat_params",
    "read_dataset",
    "write_dataset",
    "records_equal",
    "CANONICAL_LEADS",
]
