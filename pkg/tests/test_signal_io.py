import math
import struct

import numpy as np
import pytest

from ecglatent import signal_io as sio
from ecglatent.errors import FormatError, ParameterError


def test_noiseless_60bpm_has_evenly_spaced_fiducials():
    params = sio.SyntheticBeatParams()  # 60 bpm defaults
    rec = sio.generate_synthetic_ecg(params, duration_s=10.0)
    assert len(rec.fiducials) == 10
    diffs = np.diff(rec.fiducials)
    assert np.all(diffs == rec.sample_rate_hz)


def test_zero_amplitudes_give_zero_signal():
    params = sio.SyntheticBeatParams(
        p=sio.WaveParams(0.0, 200.0, 25.0),
        qrs=sio.WaveParams(0.0, 400.0, 15.0),
        t=sio.WaveParams(0.0, 650.0, 50.0),
    )
    rec = sio.generate_synthetic_ecg(params, duration_s=2.0)
    assert np.all(rec.signal == 0.0)


def test_generation_is_deterministic_for_a_seed():
    params = sio.SyntheticBeatParams(noise_std_uv=25.0, rng_seed=42)
    a = sio.generate_synthetic_ecg(params, duration_s=3.0)
    b = sio.generate_synthetic_ecg(params, duration_s=3.0)
    assert np.array_equal(a.signal, b.signal)
    assert a.fiducials == b.fiducials


def test_qrs_amplitude_sets_peak_within_one_percent():
    rec = sio.generate_synthetic_ecg(sio.SyntheticBeatParams(), duration_s=4.0)
    peak = float(np.abs(rec.signal[0]).max())  # lead 0 has gain 1
    assert abs(peak - 1000.0) <= 10.0


@pytest.mark.parametrize("hr,duration", [(50.0, 7.3), (75.0, 5.0), (100.0, 9.9), (120.0, 4.4)])
def test_fiducial_count_matches_heart_rate(hr, duration):
    params = sio.SyntheticBeatParams(heart_rate_bpm=hr)
    rec = sio.generate_synthetic_ecg(params, duration_s=duration)
    expected = math.floor(duration * hr / 60.0)
    assert abs(len(rec.fiducials) - expected) <= 1


def _random_records(n, rng):
    records = []
    for i in range(n):
        params = sio.random_beat_params(rng, noise_std_uv=rng.uniform(0, 30))
        records.append(
            sio.generate_synthetic_ecg(
                params, duration_s=rng.uniform(1.5, 4.0), record_id=f"r{i:03d}"
            )
        )
    return records


def test_binary_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(7)
    records = _random_records(100, rng)
    path = str(tmp_path / "ds.ecgl")
    sio.write_dataset(records, path)
    back = sio.read_dataset(path)
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert sio.records_equal(a, b)


def test_csv_round_trip_within_tolerance(tmp_path):
    rng = np.random.default_rng(8)
    records = _random_records(10, rng)
    path = str(tmp_path / "csvdir")
    sio.write_dataset(records, path, fmt="csv")
    back = {r.id: r for r in sio.read_dataset(path)}
    assert set(back) == {r.id for r in records}
    for a in records:
        b = back[a.id]
        # CSV stores 9 significant digits; tolerance is relative to scale
        atol = 1e-6 * max(1.0, float(np.abs(a.signal).max()))
        assert sio.records_equal(a, b, atol_uv=atol)
        assert a.fiducials == b.fiducials


def test_non_finite_sample_raises_format_error(tmp_path):
    rec = sio.generate_synthetic_ecg(sio.SyntheticBeatParams(), duration_s=2.0)
    path = str(tmp_path / "bad.ecgl")
    sio.write_dataset([rec], path)
    blob = bytearray(open(path, "rb").read())
    marker = np.ascontiguousarray(rec.signal[0, :4], dtype="<f4").tobytes()
    off = bytes(blob).index(marker)
    blob[off : off + 4] = struct.pack("<f", float("nan"))
    open(path, "wb").write(bytes(blob))
    with pytest.raises(FormatError):
        sio.read_dataset(path)


def test_csv_nan_raises_format_error(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time_s,I\n0.0,1.0\n0.001,nan\n")
    with pytest.raises(FormatError):
        sio.read_dataset(str(path))


def test_empty_file_reads_as_empty_list(tmp_path):
    path = tmp_path / "empty.ecgl"
    path.write_bytes(b"")
    assert sio.read_dataset(str(path)) == []


def test_bad_magic_raises_format_error(tmp_path):
    path = tmp_path / "junk.ecgl"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        sio.read_dataset(str(path))


def test_record_validation():
    with pytest.raises(ParameterError):
        sio.EcgRecord("x", 1000.0, ("I",), np.zeros((2, 10)))
    with pytest.raises(ParameterError):
        sio.EcgRecord("x", 0.0, ("I",), np.zeros((1, 10)))
    sig = np.zeros((1, 10))
    sig[0, 3] = np.nan
    with pytest.raises(ParameterError):
        sio.EcgRecord("x", 1000.0, ("I",), sig)
    with pytest.raises(ParameterError):
        sio.EcgRecord("x", 1000.0, ("I",), np.zeros((1, 10)), fiducials=[10])


def test_param_validation():
    with pytest.raises(ParameterError):
        sio.generate_synthetic_ecg(sio.SyntheticBeatParams(heart_rate_bpm=10.0), 2.0)
    with pytest.raises(ParameterError):
        sio.generate_synthetic_ecg(sio.SyntheticBeatParams(), 0.0)
    bad = sio.SyntheticBeatParams(qrs=sio.WaveParams(1000.0, 100.0, 15.0))
    with pytest.raises(ParameterError):
        sio.generate_synthetic_ecg(bad, 2.0)


def test_random_beat_params_always_valid():
    rng = np.random.default_rng(0)
    for _ in range(200):
        sio.random_beat_params(rng, noise_std_uv=10.0).validate()
