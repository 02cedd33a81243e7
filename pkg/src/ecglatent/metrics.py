"""Reconstruction fidelity metrics, analytic QRS measurements, and
linear/logistic probes over latent encodings.

MAE/MSE/DTW are computed in microvolts on unscaled beats; probe
reports carry R2 / MAE +- SD for regression and AUROC plus sensitivity
at specificity 0.9 for classification.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningError, ParameterError, ShapeError
from .preprocess import BEAT_SAMPLES, SEGMENT_BOUNDS, XYZ_LEADS

QRS_SEGMENT = SEGMENT_BOUNDS[1]


@dataclass
class ReconstructionReport:
    mae_p: float
    mae_qrs: float
    mae_t: float
    mae_full: float
    mse_full: float
    dtw_full: float
    per_lead_mae: dict = field(default_factory=dict)
    per_lead_dtw: dict = field(default_factory=dict)


@dataclass
class MeasurementSet:
    qrs_duration_ms: float
    amplitude_qrs_3d_uv: float
    vti_qrs_3d_uvs: float


@dataclass
class ProbeReport:
    task: str  # regression | classification
    r2: float | None = None
    mae: float | None = None
    mae_sd: float | None = None
    auroc: float | None = None
    sensitivity_at_spec90: float | None = None


def _check_beat_pair(x, x_prime):
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    if x.shape != xp.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {xp.shape}")
    if x.shape != (3, BEAT_SAMPLES):
        raise ShapeError(f"expected (3, {BEAT_SAMPLES}) beats, got {x.shape}")
    return x, xp


def _dtw_dp(a: np.ndarray, b: np.ndarray) -> float:
    n, m = len(a), len(b)
    prev = np.full(m + 1, np.inf)
    prev[0] = 0.0
    cur = np.empty(m + 1)
    for i in range(1, n + 1):
        cur[0] = np.inf
        for j in range(1, m + 1):
            best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            if prev[j - 1] < best:
                best = prev[j - 1]
            cur[j] = abs(a[i - 1] - b[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


try:  # full-length beats make the pure-Python DP impractically slow
    from numba import njit

    _dtw_dp = njit(cache=True)(_dtw_dp)
except ImportError:  # pragma: no cover
    pass


def dtw_distance(a, b) -> float:
    """Classic DTW with absolute-difference cost, no window, no normalization."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ParameterError("dtw_distance requires nonempty sequences")
    return float(_dtw_dp(a, b))


def reconstruction_metrics(x, x_prime) -> ReconstructionReport:
    """Per-segment and full-signal MAE/MSE/DTW between beats in uV."""
    x, xp = _check_beat_pair(x, x_prime)
    err = np.abs(x - xp)
    seg_mae = [float(err[:, a:b].mean()) for a, b in SEGMENT_BOUNDS]
    per_lead_mae = {lead: float(err[i].mean()) for i, lead in enumerate(XYZ_LEADS)}
    per_lead_dtw = {
        lead: dtw_distance(x[i], xp[i]) for i, lead in enumerate(XYZ_LEADS)
    }
    return ReconstructionReport(
        mae_p=seg_mae[0],
        mae_qrs=seg_mae[1],
        mae_t=seg_mae[2],
        mae_full=float(err.mean()),
        mse_full=float(((x - xp) ** 2).mean()),
        dtw_full=float(sum(per_lead_dtw.values())),
        per_lead_mae=per_lead_mae,
        per_lead_dtw=per_lead_dtw,
    )


REPORT_FIELDS = ("mae_p", "mae_qrs", "mae_t", "mae_full", "mse_full", "dtw_full")


def summarize_reports(reports: list[ReconstructionReport]) -> dict:
    """Mean +- SD across beats for every scalar and per-lead metric."""
    out = {}
    for f in REPORT_FIELDS:
        vals = np.array([getattr(r, f) for r in reports])
        out[f] = (float(vals.mean()), float(vals.std()))
    for lead in XYZ_LEADS:
        for key, attr in (("mae", "per_lead_mae"), ("dtw", "per_lead_dtw")):
            vals = np.array([getattr(r, attr)[lead] for r in reports])
            out[f"{key}_{lead}"] = (float(vals.mean()), float(vals.std()))
    return out


# ---------------------------------------------------------------------------
# analytic QRS measurements


def measure_beat(beat_uv) -> MeasurementSet:
    """QRS duration, 3-D amplitude, and voltage-time integral of a uV beat.

    Works on the vector magnitude sqrt(X^2+Y^2+Z^2); the QRS extent is
    the contiguous region around the in-segment peak where the
    magnitude exceeds 5% of the peak plus twice the noise floor
    (median magnitude over the first 50 ms).
    """
    beat = np.asarray(beat_uv, dtype=np.float64)
    if beat.shape != (3, BEAT_SAMPLES):
        raise ShapeError(f"expected (3, {BEAT_SAMPLES}), got {beat.shape}")
    m = np.sqrt((beat**2).sum(axis=0))
    a, b = QRS_SEGMENT
    seg = m[a:b]
    peak_off = int(np.argmax(seg))
    peak = float(seg[peak_off])
    if peak == 0.0:
        return MeasurementSet(0.0, 0.0, 0.0)
    noise_floor = float(np.median(m[:50]))
    threshold = 0.05 * peak + 2.0 * noise_floor

    lo = peak_off
    while lo > 0 and seg[lo - 1] > threshold:
        lo -= 1
    hi = peak_off
    while hi < len(seg) - 1 and seg[hi + 1] > threshold:
        hi += 1
    # 1 sample == 1 ms on the beat grid
    duration_ms = float(hi - lo + 1)
    vti = float(np.trapezoid(seg[lo : hi + 1])) * 1e-3  # uV * s
    return MeasurementSet(duration_ms, peak, vti)


def measure_dataset(beats_uv: np.ndarray) -> dict[str, np.ndarray]:
    """Stack measurements over (N, 3, 750) beats into target vectors."""
    sets = [measure_beat(b) for b in np.asarray(beats_uv)]
    return {
        "qrs_duration_ms": np.array([s.qrs_duration_ms for s in sets]),
        "amplitude_qrs_3d_uv": np.array([s.amplitude_qrs_3d_uv for s in sets]),
        "vti_qrs_3d_uvs": np.array([s.vti_qrs_3d_uvs for s in sets]),
    }


# ---------------------------------------------------------------------------
# classification statistics


def auroc(scores, labels) -> float:
    """Rank-statistic AUROC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ParameterError("AUROC undefined: labels contain a single class")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def sensitivity_at_specificity(scores, labels, target: float = 0.9) -> float:
    """Sensitivity at the threshold whose specificity is closest to
    ``target`` from above (predict positive when score > threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ParameterError("sensitivity undefined: labels contain a single class")
    thresholds = np.unique(scores)
    best = None  # (specificity, -sensitivity)
    best_sens = 0.0
    for thr in np.concatenate([thresholds, [np.inf]]):
        pred_pos = scores > thr
        tp = int((pred_pos & pos).sum())
        fp = int((pred_pos & ~pos).sum())
        spec = 1.0 - fp / n_neg
        sens = tp / n_pos
        if spec >= target:
            key = (spec, -sens)
            if best is None or key < best:
                best = key
                best_sens = sens
    return float(best_sens)


# ---------------------------------------------------------------------------
# probes


@dataclass
class LinearProbe:
    coef: np.ndarray
    intercept: float
    x_mean: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return (x - self.x_mean) @ self.coef + self.intercept


@dataclass
class LogisticProbe:
    coef: np.ndarray
    intercept: float
    x_mean: np.ndarray
    x_scale: np.ndarray

    def decision(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return ((x - self.x_mean) / self.x_scale) @ self.coef + self.intercept

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision(x)))


def fit_linear_probe(encodings, targets, l2: float = 1e-3) -> LinearProbe:
    """Closed-form ridge regression with an unpenalized intercept."""
    x = np.atleast_2d(np.asarray(encodings, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64)
    if l2 < 0:
        raise ParameterError("l2 must be >= 0")
    x_mean = x.mean(axis=0)
    y_mean = float(y.mean())
    xc = x - x_mean
    gram = xc.T @ xc + l2 * np.eye(x.shape[1])
    if l2 == 0.0 and np.linalg.matrix_rank(gram) < x.shape[1]:
        raise ConditioningError("rank-deficient design with l2=0")
    coef = np.linalg.solve(gram, xc.T @ (y - y_mean))
    return LinearProbe(coef, y_mean, x_mean)


def fit_logistic_probe(
    encodings, labels, l2: float = 1e-3, tol: float = 1e-8, max_iter: int = 200
) -> LogisticProbe:
    """L2-regularized logistic regression by damped Newton iterations,
    run to gradient norm < ``tol``; deterministic."""
    x = np.atleast_2d(np.asarray(encodings, dtype=np.float64))
    y = np.asarray(labels).astype(np.float64)
    if l2 < 0:
        raise ParameterError("l2 must be >= 0")
    if np.unique(y).size < 2:
        raise ParameterError("labels must contain both classes")
    x_mean = x.mean(axis=0)
    x_scale = x.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    xs = np.hstack([np.ones((x.shape[0], 1)), (x - x_mean) / x_scale])
    d = xs.shape[1]
    reg = l2 * np.eye(d)
    reg[0, 0] = 0.0  # intercept unpenalized
    w = np.zeros(d)
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(xs @ w)))
        grad = xs.T @ (p - y) + reg @ w
        if np.linalg.norm(grad) < tol:
            break
        s = np.clip(p * (1.0 - p), 1e-12, None)
        hess = (xs * s[:, None]).T @ xs + reg + 1e-12 * np.eye(d)
        step = np.linalg.solve(hess, grad)
        # halve the step until the penalized loss stops increasing
        loss0 = _logistic_loss(xs, y, w, reg)
        alpha = 1.0
        while alpha > 1e-8:
            w_new = w - alpha * step
            if _logistic_loss(xs, y, w_new, reg) <= loss0:
                break
            alpha *= 0.5
        w = w - alpha * step
    return LogisticProbe(w[1:], float(w[0]), x_mean, x_scale)


def _logistic_loss(xs, y, w, reg):
    z = xs @ w
    # log(1 + e^z) - y z, computed stably
    return float(np.logaddexp(0.0, z).sum() - y @ z + 0.5 * w @ reg @ w)


def evaluate_probe(probe, encodings, targets) -> ProbeReport:
    """Regression: R2, MAE +- SD. Classification: AUROC, sensitivity@spec 0.9."""
    if isinstance(probe, LinearProbe):
        pred = probe.predict(encodings)
        y = np.asarray(targets, dtype=np.float64)
        err = np.abs(pred - y)
        ss_res = float(((pred - y) ** 2).sum())
        ss_tot = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
        return ProbeReport(
            "regression", r2=r2, mae=float(err.mean()), mae_sd=float(err.std())
        )
    scores = probe.decision(encodings)
    labels = np.asarray(targets).astype(int)
    return ProbeReport(
        "classification",
        auroc=auroc(scores, labels),
        sensitivity_at_spec90=sensitivity_at_specificity(scores, labels, 0.9),
    )


# ---------------------------------------------------------------------------
# evaluation split


def split_by_id(ids: list[str], test_fraction: float = 0.1):
    """Deterministic train/test split by record-id hash."""
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError("test_fraction must be in (0, 1)")
    train_idx, test_idx = [], []
    for i, rec_id in enumerate(ids):
        h = int(hashlib.md5(rec_id.encode("utf-8")).hexdigest(), 16)
        if (h % 10**6) / 10**6 < test_fraction:
            test_idx.append(i)
        else:
            train_idx.append(i)
    return train_idx, test_idx


__all__ = [
    "ReconstructionReport",
    "MeasurementSet",
    "ProbeReport",
    "dtw_distance",
    "reconstruction_metrics",
    "summarize_reports",
    "measure_beat",
    "measure_dataset",
    "auroc",
    "sensitivity_at_specificity",
    "LinearProbe",
    "LogisticProbe",
    "fit_linear_probe",
    "fit_logistic_probe",
    "evaluate_probe",
    "split_by_id",
    "REPORT_FIELDS",
]
