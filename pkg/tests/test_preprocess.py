import numpy as np
import pytest

from mwcnn import preprocess as P
from mwcnn.eegio import EegRecording, Event
from mwcnn.model import FS, MW
from mwcnn.synthetic import session_recording


# -- filter design --------------------------------------------------------------------


@pytest.fixture(scope="module")
def kernel():
    return P.design_bandpass(1024, 0.5, 50.0, 4097)


def dft_gain(taps, fs, freq, bins_per_hz=64):
    """Independent oracle: zero-padded FFT magnitude at an exact bin."""
    nfft = int(fs * bins_per_hz)
    spectrum = np.fft.rfft(taps, nfft)
    return abs(spectrum[int(round(freq * bins_per_hz))])


def test_dc_gain_exactly_zero(kernel):
    assert P.dc_gain(kernel) == 0.0
    assert kernel.taps.sum() == 0.0


def test_taps_symmetric_odd(kernel):
    assert kernel.n_taps == 4097
    np.testing.assert_array_equal(kernel.taps, kernel.taps[::-1])


def test_passband_10hz(kernel):
    assert 0.99 <= dft_gain(kernel.taps, 1024, 10) <= 1.01


def test_stopband_100hz(kernel):
    assert 20 * np.log10(dft_gain(kernel.taps, 1024, 100)) <= -40


def test_frequency_response_agrees_with_dft(kernel):
    for f in (3.0, 10.0, 49.0, 75.0):
        assert abs(P.frequency_response(kernel, f)[0]) == pytest.approx(
            dft_gain(kernel.taps, 1024, f), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("low,high,taps", [(0.0, 50, 101), (60, 50, 101), (0.5, 600, 101),
                                           (0.5, 50, 100)])
def test_invalid_design(low, high, taps):
    with pytest.raises(ValueError):
        P.design_bandpass(1024, low, high, taps)


# -- zero-phase filtering -------------------------------------------------------------


@pytest.fixture(scope="module")
def filtered_sine(kernel):
    fs = 1024
    t = np.arange(60 * fs) / fs
    data = np.vstack([np.sin(2 * np.pi * 10 * t), np.full(t.size, 5.0)])
    rec = EegRecording(data.astype(np.float32), fs, ["sine", "dc"])
    return t, rec, P.filter_zero_phase(rec, kernel)


def test_filter_edges_flagged(filtered_sine, kernel):
    _, rec, out = filtered_sine
    assert out.valid_range == (kernel.n_taps - 1, rec.n_samples - (kernel.n_taps - 1))
    assert out.data.shape == rec.data.shape


def test_filter_sine_amplitude(filtered_sine):
    _, _, out = filtered_sine
    lo, hi = out.valid_range
    amp = np.max(np.abs(out.data[0, lo:hi]))
    assert abs(amp - 1.0) <= 0.02


def test_filter_rejects_offset(filtered_sine):
    _, _, out = filtered_sine
    lo, hi = out.valid_range
    assert np.max(np.abs(out.data[1, lo:hi])) < 1e-3 * 5.0


def test_filter_zero_phase(filtered_sine):
    t, rec, out = filtered_sine
    lo, hi = out.valid_range
    x = rec.data[0, lo:hi].astype(np.float64)
    y = out.data[0, lo:hi].astype(np.float64)
    lags = np.arange(-20, 21)
    xc = [np.dot(x[20:-20], y[20 + k : y.size - 20 + k]) for k in lags]
    assert lags[int(np.argmax(xc))] == 0
    # least-squares phase of the 10 Hz component
    basis = np.column_stack([np.sin(2 * np.pi * 10 * t[lo:hi]), np.cos(2 * np.pi * 10 * t[lo:hi])])
    (a_in, b_in), *_ = np.linalg.lstsq(basis, x, rcond=None)
    (a_out, b_out), *_ = np.linalg.lstsq(basis, y, rcond=None)
    assert abs(np.arctan2(b_out, a_out) - np.arctan2(b_in, a_in)) < 0.01


def test_filter_too_short(kernel):
    rec = EegRecording(np.zeros((1, 3 * kernel.n_taps), np.float32), 1024, ["a"])
    with pytest.raises(ValueError, match="too short"):
        P.filter_zero_phase(rec, kernel)


# -- windows ------------------------------------------------------------------------------


def flat_recording(n_seconds, fs=1024, n_channels=2):
    data = np.arange(n_channels * n_seconds * fs, dtype=np.float32).reshape(n_channels, -1)
    return EegRecording(data, fs, [f"c{i}" for i in range(n_channels)], 1, 1)


def test_mw_window_placement():
    rec = flat_recording(30)
    (w,), skipped = P.extract_mw_windows(rec, [Event(20480, "button_press")], 8)
    assert skipped == 0
    assert w.origin_offset == 10240
    assert w.origin_offset + w.data.shape[1] == 18432 == 20480 - 2 * 1024
    assert w.label == MW
    np.testing.assert_array_equal(w.data, rec.data[:, 10240:18432])


def test_mw_window_skip_early_press():
    windows, skipped = P.extract_mw_windows(flat_recording(30), [Event(5000, "button_press")], 8)
    assert windows == [] and skipped == 1


@pytest.mark.parametrize("seconds", [2, 5])
def test_short_windows_share_anchor(seconds):
    (w,), _ = P.extract_mw_windows(flat_recording(30), [Event(20480, "button_press")], seconds)
    assert w.origin_offset == 10240
    assert w.data.shape[1] == seconds * 1024


def fs_violations(offsets, length, events, fs, n_samples):
    """Brute-force check of every FS placement rule."""
    bad = []
    presses = [e.sample_index for e in events if e.kind == "button_press"]
    start = min(e.sample_index for e in events if e.kind == "counting_start")
    qs = [e.sample_index for e in events if e.kind == "question_start"]
    qe = [e.sample_index for e in events if e.kind == "question_end"]
    for o in offsets:
        cover = set(range(o, o + length))
        if o < start or o + length > n_samples:
            bad.append((o, "bounds"))
        for p in presses:
            mw = set(range(p - 10 * fs, p - 10 * fs + length))
            pre = set(range(p - 2 * fs, p + 1))
            if cover & mw or cover & pre:
                bad.append((o, "press", p))
        for a, b in zip(qs, qe):
            if cover & set(range(a, b + 1)):
                bad.append((o, "question", a))
    offsets = sorted(offsets)
    for a, b in zip(offsets, offsets[1:]):
        if b < a + length:
            bad.append((a, "overlap", b))
    return bad


def test_fs_windows_respect_predicates():
    fs = 64
    rec, events = session_recording([40.0], duration_s=120, sampling_rate=fs, n_channels=2)
    out = P.extract_fs_windows(rec, events, 8, 3, np.random.default_rng(0))
    assert len(out) == 3 and all(w.label == FS for w in out)
    assert fs_violations([w.origin_offset for w in out], 8 * fs, events, fs, rec.n_samples) == []


def test_fs_windows_capacity_error():
    fs = 64
    rec, events = session_recording([40.0], duration_s=60, sampling_rate=fs, n_channels=1)
    cap = P.fs_capacity(rec, events, 8)
    with pytest.raises(P.InsufficientSpanError) as err:
        P.extract_fs_windows(rec, events, 8, cap + 1, np.random.default_rng(0))
    assert err.value.achievable == cap
    assert f"only {cap}" in str(err.value)


def test_fs_windows_deterministic():
    rec, events = session_recording([40.0, 80.0], duration_s=150, sampling_rate=64, n_channels=1)
    a = P.extract_fs_windows(rec, events, 8, 4, np.random.default_rng(9))
    b = P.extract_fs_windows(rec, events, 8, 4, np.random.default_rng(9))
    assert [w.origin_offset for w in a] == [w.origin_offset for w in b]


def test_fs_windows_need_counting_start():
    rec = flat_recording(30)
    with pytest.raises(ValueError, match="counting_start"):
        P.extract_fs_windows(rec, [Event(20480, "button_press")], 8, 1, np.random.default_rng(0))


# -- z-score -------------------------------------------------------------------------------


def test_zscore_hand_case():
    out = P.zscore(np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]))
    np.testing.assert_allclose(out[0], [-1.22474, 0, 1.22474], atol=1e-5)
    np.testing.assert_array_equal(out[1], [0, 0, 0])


def test_zscore_moments(rng):
    out = P.zscore(rng.normal(3, 7, size=(5, 500)))
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-10)
    np.testing.assert_allclose(out.std(axis=1), 1, atol=1e-6)


def test_zscore_window_mode(rng):
    out = P.zscore(rng.normal(size=(3, 50)) * [[1], [2], [3]], mode="window")
    assert abs(out.mean()) < 1e-10 and abs(out.std() - 1) < 1e-10


# -- dataset -------------------------------------------------------------------------------


def build(items, **kw):
    kw.setdefault("n_taps", 129)
    kw.setdefault("band", (0.5, 10.0))
    return P.build_dataset(items, window_seconds=8, seed=kw.pop("seed", 0), **kw)


def test_build_single_press():
    ds = build([session_recording([30.0], duration_s=90, sampling_rate=64, n_channels=2)])
    assert ds.class_counts() == {"MW": 1, "FS": 1}
    assert all(s.data.shape == (2, 8 * 64) for s in ds.samples)


def test_build_per_subject_balance():
    a = session_recording([20.0 + 30 * i for i in range(10)], duration_s=700, sampling_rate=32,
                          n_channels=2, subject_id=1)
    b = session_recording([20.0 + 30 * i for i in range(12)], duration_s=800, sampling_rate=32,
                          n_channels=2, subject_id=2)
    ds = build([a, b], n_taps=65)
    for subject, n in ((1, 10), (2, 12)):
        labels = [s.label for s in ds.samples if s.subject_id == subject]
        assert labels.count(MW) == n and labels.count(FS) == n


def test_build_windows_avoid_filter_edges():
    rec, events = session_recording([12.0, 60.0], duration_s=100, sampling_rate=64, n_channels=2)
    ds = build([(rec, events)], n_taps=257)
    edge = 256
    for s in ds.samples:
        assert s.origin_offset >= edge
        assert s.origin_offset + s.data.shape[1] <= rec.n_samples - edge
    # the press at 12 s starts its window inside the unreliable edge
    assert ds.skipped == 1


def test_build_normalised():
    ds = build([session_recording([30.0, 60.0], duration_s=120, sampling_rate=64, n_channels=3)])
    for s in ds.samples:
        assert np.all(np.abs(s.data.mean(axis=1)) < 1e-5)
        assert np.all(np.abs(s.data.std(axis=1) - 1) < 1e-4)


def random_dataset(rng, n=10, c=3, t=20):
    samples = [P.WindowSample(rng.normal(size=(c, t)).astype(np.float32), int(i % 2), 1 + i % 2,
                              i, int(rng.integers(0, 2**40))) for i in range(n)]
    return P.Dataset(samples, t / 10.0, 10.0, c)


def test_dataset_roundtrip(tmp_path, rng):
    ds = random_dataset(rng)
    path = tmp_path / "d.mwds"
    P.save_dataset(ds, path)
    back = P.load_dataset(path)
    assert (back.sampling_rate, back.n_channels, back.n_timesteps) == (10.0, 3, 20)
    for a, b in zip(ds.samples, back.samples):
        assert a.data.tobytes() == b.data.tobytes()
        assert (a.label, a.subject_id, a.session_id, a.origin_offset) == (
            b.label, b.subject_id, b.session_id, b.origin_offset)


def test_dataset_version_mismatch(tmp_path, rng):
    path = tmp_path / "d.mwds"
    P.save_dataset(random_dataset(rng), path)
    buf = bytearray(path.read_bytes())
    buf[4:8] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(buf))
    with pytest.raises(P.DatasetFormatError, match="version"):
        P.load_dataset(path)


def test_dataset_bad_label(tmp_path, rng):
    path = tmp_path / "d.mwds"
    P.save_dataset(random_dataset(rng), path)
    buf = bytearray(path.read_bytes())
    buf[28] = 7  # label byte of the first sample
    path.write_bytes(bytes(buf))
    with pytest.raises(P.DatasetFormatError, match="label"):
        P.load_dataset(path)
