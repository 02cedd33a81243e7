"""From raw multi-lead records to scaled 3x750 X/Y/Z representative beats.

Stages: QRS-onset detection (annotated fiducials take precedence over
the built-in energy detector), median representative-beat extraction
on a fixed 1000 Hz / 750 ms grid, Kors lead transformation, and global
absolute-max scaling with per-lead mean subtraction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateScaleError,
    ExtractionError,
    LeadMissingError,
    ParameterError,
    ShapeError,
)
from .signal_io import EcgRecord

BEAT_SAMPLES = 750
BEAT_RATE_HZ = 1000.0
SEGMENT_BOUNDS = ((0, 250), (250, 500), (500, 750))  # P, QRS, T
QRS_ONSET_SAMPLE = 275  # window starts 275 ms before the QRS onset
XYZ_LEADS = ("X", "Y", "Z")

_EIGHT_LEADS = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")


@dataclass
class XyzBeat:
    """A 3x750 representative beat; values in uV unless scaled."""

    samples: np.ndarray
    source_id: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (3, BEAT_SAMPLES):
            raise ShapeError(
                f"beat {self.source_id!r}: expected (3, {BEAT_SAMPLES}), "
                f"got {self.samples.shape}"
            )
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError(f"beat {self.source_id!r}: non-finite samples")


@dataclass
class ScalingParams:
    """Global abs-max divisor plus per-lead means (in normalized units)."""

    abs_max: float
    per_lead_mean: np.ndarray

    def __post_init__(self):
        self.per_lead_mean = np.asarray(self.per_lead_mean, dtype=np.float64).reshape(3)
        if self.abs_max <= 0:
            raise ParameterError("abs_max must be > 0")

    def apply(self, samples_uv: np.ndarray) -> np.ndarray:
        return samples_uv / self.abs_max - self.per_lead_mean[:, None]

    def invert(self, samples_scaled: np.ndarray) -> np.ndarray:
        return (samples_scaled + self.per_lead_mean[:, None]) * self.abs_max


def load_kors_matrix(path: str | None = None) -> np.ndarray:
    """Load the 3x8 lead-conversion matrix (default: packaged coefficients)."""
    if path is None:
        path = os.path.join(os.path.dirname(__file__), "data", "kors_matrix.txt")
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.extend(float(v) for v in line.split())
    mat = np.asarray(rows, dtype=np.float64)
    if mat.size != 24:
        raise ParameterError(f"{path}: expected 24 coefficients, got {mat.size}")
    return mat.reshape(3, 8)


# ---------------------------------------------------------------------------
# QRS detection


def _moving_mean(x: np.ndarray, width: int) -> np.ndarray:
    width = max(1, width)
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="same")


def detect_qrs_onsets(record: EcgRecord) -> list[int]:
    """Return ascending QRS-onset sample indices.

    Annotated fiducials are returned unchanged. Otherwise an energy
    detector runs on the lead-mean signal: 5-25 Hz band-pass via
    difference-of-moving-averages, squaring, 120 ms integration, an
    adaptive threshold at 0.4x the rolling peak, then the onset is found
    by walking backward from each detection to the first sample whose
    energy exceeds 10% of the local peak.
    """
    if record.duration_s < 1.0:
        raise ParameterError(f"record {record.id!r}: need at least 1 s of signal")
    if record.fiducials is not None:
        return sorted(record.fiducials)

    fs = record.sample_rate_hz
    x = record.signal.astype(np.float64).mean(axis=0)
    if not np.any(x):
        return []

    # band-pass ~5-25 Hz: short minus long moving average
    low = _moving_mean(x, int(round(fs / 25.0)))
    band = low - _moving_mean(x, int(round(fs / 5.0)))
    energy = band * band
    integ = _moving_mean(energy, int(round(0.120 * fs)))

    # rolling peak over a ~2 s window, evaluated blockwise
    win = max(1, int(round(2.0 * fs)))
    rolling_peak = np.empty_like(integ)
    for start in range(0, len(integ), win):
        lo = max(0, start - win)
        hi = min(len(integ), start + 2 * win)
        rolling_peak[start : start + win] = integ[lo:hi].max()
    above = integ > 0.4 * rolling_peak

    onsets: list[int] = []
    refractory = int(round(0.25 * fs))
    i = 0
    n = len(above)
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j < n and above[j]:
            j += 1
        peak_idx = i + int(np.argmax(energy[i:j]))
        local_peak = energy[peak_idx]
        if local_peak > 0:
            k = peak_idx
            back_limit = max(0, peak_idx - refractory)
            while k > back_limit and energy[k - 1] > 0.10 * local_peak:
                k -= 1
            if not onsets or k - onsets[-1] >= refractory:
                onsets.append(k)
        i = max(j, peak_idx + refractory)
    return onsets


# ---------------------------------------------------------------------------
# representative beat


def extract_representative_beat(record: EcgRecord, onsets: list[int]) -> np.ndarray:
    """Median beat over all complete 750 ms windows, on the 1000 Hz grid.

    Each window spans [onset - 275 ms, onset + 475 ms), so the window
    center sits 100 ms after the QRS onset and the onset itself lands at
    sample 275. Resampling is linear interpolation.
    """
    fs = record.sample_rate_hz
    sig = record.signal.astype(np.float64)
    t_rec = np.arange(record.num_samples) / fs
    windows = []
    for onset in onsets:
        onset_t = onset / fs
        t_grid = onset_t + (np.arange(BEAT_SAMPLES) - QRS_ONSET_SAMPLE) / BEAT_RATE_HZ
        if t_grid[0] < 0 or t_grid[-1] > t_rec[-1]:
            continue
        win = np.empty((sig.shape[0], BEAT_SAMPLES))
        for li in range(sig.shape[0]):
            win[li] = np.interp(t_grid, t_rec, sig[li])
        windows.append(win)
    if not windows:
        raise ExtractionError(
            f"record {record.id!r}: no complete 750 ms beat window fits"
        )
    return np.median(np.stack(windows), axis=0)


def derive_missing_leads(beat: np.ndarray, leads: tuple[str, ...]) -> np.ndarray:
    """Select the 8 independent leads (I, II, V1-V6) in canonical order."""
    index = {name: i for i, name in enumerate(leads)}
    rows = []
    for name in _EIGHT_LEADS:
        if name not in index:
            raise LeadMissingError(f"missing lead {name}")
        rows.append(beat[index[name]])
    return np.asarray(rows, dtype=np.float64)


def kors_transform(beat8: np.ndarray, matrix_coeffs: np.ndarray) -> np.ndarray:
    """Linear map from the 8 independent leads to X/Y/Z rows."""
    beat8 = np.asarray(beat8, dtype=np.float64)
    matrix_coeffs = np.asarray(matrix_coeffs, dtype=np.float64)
    if beat8.ndim != 2 or beat8.shape[0] != 8:
        raise ShapeError(f"expected 8 lead rows, got shape {beat8.shape}")
    if matrix_coeffs.shape != (3, 8):
        raise ShapeError(f"conversion matrix must be 3x8, got {matrix_coeffs.shape}")
    return matrix_coeffs @ beat8


def record_to_xyz_beat(
    record: EcgRecord, kors_matrix: np.ndarray
) -> XyzBeat:
    """Full per-record stage: onsets -> representative beat -> X/Y/Z."""
    onsets = detect_qrs_onsets(record)
    if not onsets:
        raise ExtractionError(f"record {record.id!r}: no QRS onsets found")
    rep = extract_representative_beat(record, onsets)
    eight = derive_missing_leads(rep, record.leads)
    return XyzBeat(kors_transform(eight, kors_matrix), record.id)


# ---------------------------------------------------------------------------
# dataset scaling


def scale_dataset(beats: list[XyzBeat]) -> tuple[list[XyzBeat], ScalingParams]:
    """Divide by the global abs max, then subtract the per-lead dataset mean."""
    if not beats:
        raise ParameterError("scale_dataset needs a nonempty beat list")
    stack = np.stack([b.samples for b in beats])  # (N, 3, 750)
    abs_max = float(np.abs(stack).max())
    if abs_max == 0:
        raise DegenerateScaleError("all-zero dataset, abs max is 0")
    divided = stack / abs_max
    per_lead_mean = divided.mean(axis=(0, 2))
    params = ScalingParams(abs_max, per_lead_mean)
    scaled = [
        XyzBeat(divided[i] - per_lead_mean[:, None], beats[i].source_id)
        for i in range(len(beats))
    ]
    return scaled, params


__all__ = [
    "XyzBeat",
    "ScalingParams",
    "load_kors_matrix",
    "detect_qrs_onsets",
    "extract_representative_beat",
    "derive_missing_leads",
    "kors_transform",
    "record_to_xyz_beat",
    "scale_dataset",
    "BEAT_SAMPLES",
    "SEGMENT_BOUNDS",
    "QRS_ONSET_SAMPLE",
    "XYZ_LEADS",
]
