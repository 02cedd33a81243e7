import itertools
import math

import numpy as np
import pytest

from ecglatent import metrics as mx
from ecglatent.errors import ConditioningError, ParameterError


# ---------------------------------------------------------------------------
# DTW


def test_dtw_self_distance_is_zero():
    a = np.sin(np.linspace(0, 3, 40))
    assert mx.dtw_distance(a, a) == 0.0


def test_dtw_single_samples():
    assert mx.dtw_distance([0.0], [3.0]) == 3.0


def _dtw_brute(a, b):
    best = math.inf
    n, m = len(a), len(b)

    def walk(i, j, cost):
        nonlocal best
        cost += abs(a[i] - b[j])
        if cost >= best:
            return
        if i == n - 1 and j == m - 1:
            best = min(best, cost)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            ii, jj = i + di, j + dj
            if ii < n and jj < m:
                walk(ii, jj, cost)

    walk(0, 0, 0.0)
    return best


def test_dtw_matches_brute_force_on_short_sequences():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.normal(size=rng.integers(1, 7))
        b = rng.normal(size=rng.integers(1, 7))
        assert mx.dtw_distance(a, b) == pytest.approx(_dtw_brute(a, b), abs=1e-12)


def test_dtw_empty_raises():
    with pytest.raises(ParameterError):
        mx.dtw_distance([], [1.0])


# ---------------------------------------------------------------------------
# reconstruction metrics


def test_reconstruction_metrics_perfect_is_zero():
    x = np.random.default_rng(1).normal(size=(3, 750))
    rep = mx.reconstruction_metrics(x, x)
    assert rep.mae_full == rep.mse_full == rep.dtw_full == 0.0


def test_constant_offset_mae_and_mse():
    x = np.zeros((3, 750))
    rep = mx.reconstruction_metrics(x, x + 10.0)
    assert rep.mae_full == pytest.approx(10.0)
    assert rep.mse_full == pytest.approx(100.0)


def test_mae_full_is_mean_of_segment_maes_and_mse_bound():
    rng = np.random.default_rng(2)
    x, xp = rng.normal(size=(3, 750)), rng.normal(size=(3, 750))
    rep = mx.reconstruction_metrics(x, xp)
    assert rep.mae_full == pytest.approx(
        (rep.mae_p + rep.mae_qrs + rep.mae_t) / 3.0, rel=1e-12
    )
    assert rep.mse_full >= rep.mae_full**2
    assert len(rep.per_lead_mae) == 3
    assert len(rep.per_lead_dtw) == 3


def test_summarize_reports_averages_fields():
    x = np.zeros((3, 750))
    reports = [
        mx.reconstruction_metrics(x, x + 2.0),
        mx.reconstruction_metrics(x, x + 4.0),
    ]
    summary = mx.summarize_reports(reports)
    mean, sd = summary["mae_full"]
    assert mean == pytest.approx(3.0)
    assert sd == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# beat measurements


def test_measure_beat_zero_signal():
    m = mx.measure_beat(np.zeros((3, 750)))
    assert (m.qrs_duration_ms, m.amplitude_qrs_3d_uv, m.vti_qrs_3d_uvs) == (0, 0, 0)


def _gaussian_qrs_beat(amp=1000.0, sigma_ms=10.0, center=375):
    beat = np.zeros((3, 750))
    t = np.arange(750, dtype=np.float64)
    beat[0] = amp * np.exp(-((t - center) ** 2) / (2.0 * sigma_ms**2))
    return beat


def test_measure_beat_gaussian_closed_forms():
    amp, sigma = 1000.0, 10.0
    m = mx.measure_beat(_gaussian_qrs_beat(amp, sigma))
    assert m.amplitude_qrs_3d_uv == pytest.approx(amp, rel=0.01)
    want_duration = 2.0 * sigma * math.sqrt(2.0 * math.log(20.0))
    assert m.qrs_duration_ms == pytest.approx(want_duration, rel=0.15)
    want_vti = amp * sigma * math.sqrt(2.0 * math.pi) * math.erf(
        math.sqrt(math.log(20.0))
    ) * 1e-3
    assert m.vti_qrs_3d_uvs == pytest.approx(want_vti, rel=0.05)


def test_measure_beat_amplitude_and_vti_are_homogeneous():
    beat = _gaussian_qrs_beat()
    m1 = mx.measure_beat(beat)
    m2 = mx.measure_beat(2.0 * beat)
    assert m2.amplitude_qrs_3d_uv == pytest.approx(2.0 * m1.amplitude_qrs_3d_uv, rel=1e-9)
    assert m2.vti_qrs_3d_uvs == pytest.approx(2.0 * m1.vti_qrs_3d_uvs, rel=1e-9)


def test_measure_dataset_returns_three_targets():
    beats = np.stack([_gaussian_qrs_beat(a) for a in (500.0, 1000.0, 1500.0)])
    targets = mx.measure_dataset(beats)
    assert set(targets) == {"qrs_duration_ms", "amplitude_qrs_3d_uv", "vti_qrs_3d_uvs"}
    assert np.all(np.diff(targets["amplitude_qrs_3d_uv"]) > 0)


# ---------------------------------------------------------------------------
# classification metrics


def test_auroc_hand_case():
    assert mx.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_perfect_and_ties():
    assert mx.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert mx.auroc([0.5, 0.5, 0.5, 0.5], [0, 0, 1, 1]) == 0.5


def test_auroc_single_class_raises():
    with pytest.raises(ParameterError):
        mx.auroc([0.1, 0.2], [1, 1])


def test_sensitivity_at_specificity_separated_scores():
    scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9]
    labels = [0, 0, 0, 1, 1, 1]
    assert mx.sensitivity_at_specificity(scores, labels, 0.9) == 1.0


def test_sensitivity_at_specificity_trades_off():
    scores = [0.1, 0.85, 0.3, 0.7, 0.8, 0.9]
    labels = [0, 0, 0, 1, 1, 1]
    sens = mx.sensitivity_at_specificity(scores, labels, 0.9)
    assert 0.0 <= sens < 1.0


# ---------------------------------------------------------------------------
# probes


def test_linear_probe_recovers_exact_linear_map():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 30))
    w = rng.normal(size=30)
    y = x @ w + 1.5
    probe = mx.fit_linear_probe(x, y, l2=1e-8)
    rep = mx.evaluate_probe(probe, x, y)
    assert rep.task == "regression"
    assert rep.r2 > 0.999999
    assert rep.mae < 1e-4


def test_linear_probe_rank_deficient_without_ridge_raises():
    x = np.zeros((50, 5))
    x[:, 0] = np.arange(50)
    with pytest.raises(ConditioningError):
        mx.fit_linear_probe(x, np.arange(50.0), l2=0.0)


def test_logistic_probe_separated_classes():
    rng = np.random.default_rng(4)
    x0 = rng.normal(loc=-3.0, size=(100, 10))
    x1 = rng.normal(loc=3.0, size=(100, 10))
    x = np.vstack([x0, x1])
    y = np.array([0] * 100 + [1] * 100)
    probe = mx.fit_logistic_probe(x, y)
    rep = mx.evaluate_probe(probe, x, y)
    assert rep.task == "classification"
    assert rep.auroc == 1.0
    assert rep.sensitivity_at_spec90 == 1.0
    proba = probe.predict_proba(x)
    assert np.all((proba >= 0) & (proba <= 1))


def test_logistic_probe_random_labels_near_chance_held_out():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2000, 20))
    y = rng.integers(0, 2, size=2000)
    probe = mx.fit_logistic_probe(x[:1000], y[:1000])
    rep = mx.evaluate_probe(probe, x[1000:], y[1000:])
    assert 0.45 <= rep.auroc <= 0.55


def test_logistic_probe_single_class_raises():
    with pytest.raises(ParameterError):
        mx.fit_logistic_probe(np.zeros((10, 3)), np.ones(10))


# ---------------------------------------------------------------------------
# split helper


def test_split_by_id_is_deterministic_and_partitions():
    ids = [f"rec{i:05d}" for i in range(2000)]
    tr1, te1 = mx.split_by_id(ids, 0.1)
    tr2, te2 = mx.split_by_id(ids, 0.1)
    assert (tr1, te1) == (tr2, te2)
    assert sorted(tr1 + te1) == list(range(2000))
    frac = len(te1) / 2000
    assert 0.06 <= frac <= 0.14


def test_split_by_id_rejects_bad_fraction():
    with pytest.raises(ParameterError):
        mx.split_by_id(["a"], 0.0)


def test_split_is_stable_under_reordering():
    ids = [f"id{i}" for i in range(100)]
    _, te = mx.split_by_id(ids, 0.3)
    te_ids = {ids[i] for i in te}
    rev = list(reversed(ids))
    _, te_rev = mx.split_by_id(rev, 0.3)
    assert {rev[i] for i in te_rev} == te_ids
