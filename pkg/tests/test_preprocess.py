import numpy as np
import pytest

from ecglatent import preprocess as pp
from ecglatent import signal_io as sio
from ecglatent.errors import (
    DegenerateScaleError,
    ExtractionError,
    LeadMissingError,
    ParameterError,
    ShapeError,
)


def _record(duration_s=10.0, **kw):
    return sio.generate_synthetic_ecg(
        sio.SyntheticBeatParams(**kw), duration_s=duration_s
    )


def test_annotated_fiducials_pass_through():
    rec = _record(duration_s=2.0)
    rec.fiducials = [1500, 500]
    assert pp.detect_qrs_onsets(rec) == [500, 1500]


def test_detector_finds_ten_onsets_within_20ms():
    rec = _record(duration_s=10.0)
    truth = list(rec.fiducials)
    rec.fiducials = None
    onsets = pp.detect_qrs_onsets(rec)
    assert len(onsets) == 10
    for got, want in zip(onsets, truth):
        assert abs(got - want) <= 20


def test_detector_on_all_zero_signal_returns_empty():
    rec = sio.EcgRecord("z", 1000.0, ("I", "II"), np.zeros((2, 3000)))
    assert pp.detect_qrs_onsets(rec) == []


def test_too_short_record_raises():
    rec = sio.EcgRecord("s", 1000.0, ("I",), np.zeros((1, 500)))
    with pytest.raises(ParameterError):
        pp.detect_qrs_onsets(rec)


def test_single_beat_window_equals_record():
    # onset exactly 275 ms into a 750 ms record: the window is the record
    rng = np.random.default_rng(3)
    sig = rng.normal(size=(2, 750))
    rec = sio.EcgRecord("one", 1000.0, ("I", "II"), sig)
    beat = pp.extract_representative_beat(rec, [275])
    assert beat.shape == (2, 750)
    np.testing.assert_allclose(beat, sig.astype(np.float32), atol=1e-6)


def test_periodic_signal_representative_matches_aligned_window():
    rec = _record(duration_s=10.0)
    onsets = sorted(rec.fiducials)
    beat = pp.extract_representative_beat(rec, onsets)
    sig = rec.signal.astype(np.float64)
    mid = onsets[len(onsets) // 2]
    window = sig[:, mid - 275 : mid + 475]
    np.testing.assert_allclose(beat, window, atol=1e-6)


def test_median_rejects_one_corrupted_window_of_five():
    base = np.tile(np.sin(np.linspace(0, 4 * np.pi, 750)), (1, 5))
    sig = np.vstack([base, base])
    onsets = [275 + 750 * k for k in range(5)]
    sig[:, onsets[2] : onsets[2] + 100] += 500.0  # spike one beat
    rec = sio.EcgRecord("robust", 1000.0, ("I", "II"), sig)
    beat = pp.extract_representative_beat(rec, onsets)
    clean = sig[:, :750]
    np.testing.assert_allclose(beat, clean.astype(np.float32), atol=1e-5)


def test_incomplete_windows_are_skipped_and_none_raises():
    rec = sio.EcgRecord("edge", 1000.0, ("I",), np.zeros((1, 1000)))
    with pytest.raises(ExtractionError):
        pp.extract_representative_beat(rec, [100])  # window starts before 0


def test_kors_zero_and_linearity():
    kors = pp.load_kors_matrix()
    assert kors.shape == (3, 8)
    zero = pp.kors_transform(np.zeros((8, 750)), kors)
    assert np.all(np.abs(zero) <= 1e-9)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(8, 50)), rng.normal(size=(8, 50))
    lhs = pp.kors_transform(2.0 * a + 3.0 * b, kors)
    rhs = 2.0 * pp.kors_transform(a, kors) + 3.0 * pp.kors_transform(b, kors)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_kors_unit_impulse_on_lead_one_reads_first_column():
    kors = pp.load_kors_matrix()
    beat8 = np.zeros((8, 10))
    beat8[0, 0] = 1.0
    out = pp.kors_transform(beat8, kors)
    np.testing.assert_allclose(out[:, 0], kors[:, 0], atol=1e-12)
    assert np.all(out[:, 1:] == 0.0)


def test_kors_shape_check():
    with pytest.raises(ShapeError):
        pp.kors_transform(np.zeros((8, 10)), np.zeros((3, 7)))


def test_derive_missing_leads_selects_eight():
    twelve = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
    beat = np.arange(12)[:, None] * np.ones((12, 5))
    eight = pp.derive_missing_leads(beat, twelve)
    assert eight.shape == (8, 5)
    np.testing.assert_array_equal(eight[:, 0], [0, 1, 6, 7, 8, 9, 10, 11])


def test_derive_missing_leads_identity_on_eight():
    eight_names = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")
    beat = np.random.default_rng(1).normal(size=(8, 5))
    np.testing.assert_array_equal(pp.derive_missing_leads(beat, eight_names), beat)


def test_derive_missing_leads_raises_on_missing_v3():
    names = ("I", "II", "V1", "V2", "V4", "V5", "V6")
    with pytest.raises(LeadMissingError):
        pp.derive_missing_leads(np.zeros((7, 5)), names)


def _xyz_beats(n=8, seed=0):
    kors = pp.load_kors_matrix()
    rng = np.random.default_rng(seed)
    beats = []
    for i in range(n):
        rec = sio.generate_synthetic_ecg(
            sio.random_beat_params(rng), duration_s=3.0, record_id=f"b{i}"
        )
        beats.append(pp.record_to_xyz_beat(rec, kors))
    return beats


def test_scaling_extremal_maps_to_unit_and_inverts():
    beats = _xyz_beats()
    scaled, params = pp.scale_dataset(beats)
    stack = np.stack([b.samples for b in beats])
    divided = stack / params.abs_max
    assert abs(np.abs(divided).max() - 1.0) <= 1e-12
    for raw, s in zip(beats, scaled):
        np.testing.assert_allclose(params.invert(s.samples), raw.samples, atol=1e-6)
    # per-lead dataset mean is removed
    mean = np.stack([b.samples for b in scaled]).mean(axis=(0, 2))
    assert np.all(np.abs(mean) <= 1e-9)


def test_scaling_all_zero_raises():
    beats = [pp.XyzBeat(np.zeros((3, 750)), "z")]
    with pytest.raises(DegenerateScaleError):
        pp.scale_dataset(beats)
    with pytest.raises(ParameterError):
        pp.scale_dataset([])


def test_qrs_onset_lands_at_sample_275():
    kors = pp.load_kors_matrix()
    rec = _record(duration_s=10.0)
    beat = pp.record_to_xyz_beat(rec, kors)
    assert beat.samples.shape == (3, pp.BEAT_SAMPLES)
    assert pp.QRS_ONSET_SAMPLE == 275
    # QRS center (2 sigma after onset at default width 15 ms) near sample 305
    mag = np.linalg.norm(beat.samples, axis=0)
    assert abs(int(np.argmax(mag)) - 305) <= 5
