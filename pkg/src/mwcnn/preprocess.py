"""From continuous recordings and events to a balanced, filtered, normalised window dataset."""

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import oaconvolve

from mwcnn.model import FS, MW

log = logging.getLogger(__name__)

MW_LEAD_SECONDS = 10  # MW windows start this long before the button press
PRE_PRESS_SECONDS = 2  # excluded from every window: realising MW / moving to press
DEFAULT_TAPS = 4097


class InsufficientSpanError(ValueError):
    def __init__(self, message, achievable):
        super().__init__(message)
        self.achievable = achievable


class DatasetFormatError(ValueError):
    pass


@dataclass
class WindowSample:
    data: np.ndarray  # [n_channels, n_timesteps]
    label: int  # 0 = FS, 1 = MW
    subject_id: int
    session_id: int
    origin_offset: int


@dataclass
class Dataset:
    samples: list
    window_seconds: float
    sampling_rate: float
    n_channels: int
    skipped: int = field(default=0, compare=False)

    def __len__(self):
        return len(self.samples)

    @property
    def n_timesteps(self):
        return int(round(self.window_seconds * self.sampling_rate))

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def subjects(self):
        return np.array([s.subject_id for s in self.samples], dtype=np.int64)

    def arrays(self):
        """``(X [N, C, T] float32, y [N] int64)``."""
        if not self.samples:
            return np.empty((0, self.n_channels, self.n_timesteps), np.float32), np.empty(0, np.int64)
        return np.stack([s.data for s in self.samples]).astype(np.float32, copy=False), self.labels

    def subset(self, indices):
        return replace(self, samples=[self.samples[i] for i in indices])

    def class_counts(self):
        y = self.labels
        return {"MW": int(np.sum(y == MW)), "FS": int(np.sum(y == FS))}


# -- filtering -----------------------------------------------------------------------


@dataclass
class FilterKernel:
    taps: np.ndarray
    band: tuple
    sampling_rate: float

    @property
    def n_taps(self):
        return self.taps.size


def _hamming(n):
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))


def _lowpass(cutoff, fs, n_taps):
    m = np.arange(n_taps) - (n_taps - 1) / 2
    h = np.sinc(2 * cutoff / fs * m) * _hamming(n_taps)
    return h / math.fsum(h)


_GRID = float(2**52)


def design_bandpass(fs, low=0.5, high=50.0, n_taps=DEFAULT_TAPS):
    """Hamming-windowed sinc bandpass: difference of two unit-DC-gain lowpass kernels."""
    if not 0 < low < high < fs / 2:
        raise ValueError(f"need 0 < low < high < fs/2, got low={low}, high={high}, fs={fs}")
    if n_taps < 3 or n_taps % 2 == 0:
        raise ValueError(f"n_taps must be odd and >= 3, got {n_taps}")
    taps = _lowpass(high, fs, n_taps) - _lowpass(low, fs, n_taps)
    # snap to a 2**-52 grid and solve the centre tap in integers: every partial
    # sum is then exact, so the DC gain is exactly zero
    units = np.round(taps * _GRID).astype(np.int64)
    centre = n_taps // 2
    units[centre] = -(int(units.sum()) - int(units[centre]))
    taps = units / _GRID
    return FilterKernel(taps, (low, high), fs)


def dc_gain(kernel):
    return math.fsum(kernel.taps)


def frequency_response(kernel, freqs):
    """Complex response of the kernel (centred, so purely real for symmetric taps)."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    m = np.arange(kernel.n_taps) - (kernel.n_taps - 1) / 2
    phase = np.exp(-2j * np.pi * np.outer(freqs, m) / kernel.sampling_rate)
    return phase @ kernel.taps


def edge_samples(kernel):
    """Samples at each end left unreliable by forward-backward filtering."""
    return kernel.n_taps - 1


def filter_zero_phase(recording, kernel):
    """Apply the kernel forward then backward along time; marks the edges as unreliable."""
    n = recording.n_samples
    if n <= 3 * kernel.n_taps:
        raise ValueError(
            f"recording of {n} samples too short for a {kernel.n_taps}-tap filter "
            f"(needs more than {3 * kernel.n_taps})"
        )
    if abs(kernel.sampling_rate - recording.sampling_rate) > 1e-9:
        raise ValueError(
            f"kernel designed for {kernel.sampling_rate} Hz, recording is {recording.sampling_rate} Hz"
        )
    out = np.empty(recording.data.shape, dtype=np.float32)
    h = kernel.taps
    for ch in range(recording.n_channels):
        x = recording.data[ch].astype(np.float64)
        y = oaconvolve(x, h, mode="same")
        y = oaconvolve(y[::-1], h[::-1], mode="same")[::-1]
        out[ch] = y
    edge = edge_samples(kernel)
    lo, hi = recording.valid_range
    return replace(recording, data=out, valid_range=(max(lo, edge), min(hi, n - edge)))


# -- windows -------------------------------------------------------------------------


def _n(seconds, fs):
    return int(round(seconds * fs))


def _presses(events):
    return [e.sample_index for e in events if e.kind == "button_press"]


def mw_window_start(press, fs):
    return press - _n(MW_LEAD_SECONDS, fs)


def extract_mw_windows(recording, events, window_seconds=8):
    """One MW window per button press, starting 10 s before it.

    Returns ``(windows, n_skipped)``; presses whose window would leave the
    reliable part of the recording are skipped.
    """
    fs = recording.sampling_rate
    length = _n(window_seconds, fs)
    lo, hi = recording.valid_range
    windows, skipped = [], 0
    for p in _presses(events):
        start = mw_window_start(p, fs)
        if start < lo or start + length > hi:
            skipped += 1
            continue
        windows.append(WindowSample(recording.data[:, start : start + length].copy(), MW,
                                    recording.subject_id, recording.session_id, start))
    return windows, skipped


def forbidden_spans(recording, events, window_seconds):
    """Half-open sample spans FS windows may not touch."""
    fs = recording.sampling_rate
    length = _n(window_seconds, fs)
    spans = []
    for p in _presses(events):
        start = mw_window_start(p, fs)
        spans.append((max(start, 0), start + length))
        spans.append((max(p - _n(PRE_PRESS_SECONDS, fs), 0), p + 1))
    q_open = None
    for e in sorted(events, key=lambda e: e.sample_index):
        if e.kind == "question_start":
            q_open = e.sample_index
        elif e.kind == "question_end":
            spans.append((q_open if q_open is not None else 0, e.sample_index + 1))
            q_open = None
    if q_open is not None:
        spans.append((q_open, recording.n_samples))
    return spans


def admissible_intervals(recording, events, window_seconds):
    """Disjoint half-open intervals in which FS windows may be placed."""
    starts = [e.sample_index for e in events if e.kind == "counting_start"]
    if not starts:
        raise ValueError("no counting_start event: FS windows cannot be placed")
    lo = max(min(starts), recording.valid_range[0])
    hi = recording.valid_range[1]
    free = []
    cursor = lo
    for a, b in sorted(forbidden_spans(recording, events, window_seconds)):
        if b <= cursor:
            continue
        if a > cursor:
            free.append((cursor, min(a, hi)))
        cursor = max(cursor, b)
        if cursor >= hi:
            break
    if cursor < hi:
        free.append((cursor, hi))
    return [(a, b) for a, b in free if b > a]


def fs_capacity(recording, events, window_seconds):
    length = _n(window_seconds, recording.sampling_rate)
    return sum((b - a) // length for a, b in admissible_intervals(recording, events, window_seconds))


def _random_composition(total, parts, rng):
    """Uniformly random nonnegative integers of length ``parts`` summing to ``total``."""
    if parts == 1:
        return np.array([total])
    cuts = np.sort(rng.choice(total + parts - 1, size=parts - 1, replace=False))
    bounds = np.concatenate([[-1], cuts, [total + parts - 1]])
    return np.diff(bounds) - 1


def extract_fs_windows(recording, events, window_seconds, count, rng):
    """``count`` non-overlapping FS windows placed at random in admissible spans."""
    fs = recording.sampling_rate
    length = _n(window_seconds, fs)
    intervals = admissible_intervals(recording, events, window_seconds)
    caps = [(b - a) // length for a, b in intervals]
    capacity = sum(caps)
    if count > capacity:
        raise InsufficientSpanError(
            f"requested {count} FS windows but only {capacity} fit in the admissible span "
            f"(subject {recording.subject_id}, session {recording.session_id})",
            capacity,
        )
    if count == 0:
        return []
    slots = np.repeat(np.arange(len(intervals)), caps)
    chosen = rng.choice(slots.size, size=count, replace=False)
    per_interval = np.bincount(slots[chosen], minlength=len(intervals))
    offsets = []
    for (a, b), k in zip(intervals, per_interval):
        if k == 0:
            continue
        gaps = _random_composition((b - a) - k * length, int(k) + 1, rng)
        pos = a
        for i in range(k):
            pos += int(gaps[i])
            offsets.append(pos)
            pos += length
    offsets.sort()
    return [WindowSample(recording.data[:, o : o + length].copy(), FS, recording.subject_id,
                         recording.session_id, o) for o in offsets]


def zscore(window, mode="channel"):
    """Zero mean, unit (population) std per channel, or over the whole window.

    Channels whose std is below 1e-8 come out as zeros.
    """
    x = np.asarray(window, dtype=np.float64)
    axis = 1 if mode == "channel" else None
    if mode not in ("channel", "window"):
        raise ValueError(f"zscore mode must be 'channel' or 'window', got {mode!r}")
    mean = x.mean(axis=axis, keepdims=True)
    std = x.std(axis=axis, keepdims=True)
    safe = np.where(std < 1e-8, 1.0, std)
    out = np.where(std < 1e-8, 0.0, (x - mean) / safe)
    return out.astype(np.asarray(window).dtype if np.asarray(window).dtype.kind == "f" else np.float64)


def recording_rng(seed, subject_id, session_id):
    return np.random.default_rng([seed, subject_id, session_id])


def build_dataset(items, window_seconds=8, seed=0, n_taps=DEFAULT_TAPS, band=(0.5, 50.0),
                  zscore_mode="channel", apply_filter=True):
    """Filter, extract MW/FS windows, z-score.

    ``items`` is a sequence of ``(EegRecording, events)`` pairs.  FS windows are
    drawn so every subject ends up with as many FS as MW windows.
    """
    items = list(items)
    if not items:
        raise ValueError("no recordings given")
    fs = items[0][0].sampling_rate
    n_channels = items[0][0].n_channels
    prepared = []
    skipped = 0
    for rec, events in items:
        if rec.sampling_rate != fs or rec.n_channels != n_channels:
            raise ValueError("all recordings must share sampling rate and channel count")
        if apply_filter:
            rec = filter_zero_phase(rec, design_bandpass(fs, band[0], band[1], n_taps))
        mw, n_skip = extract_mw_windows(rec, events, window_seconds)
        skipped += n_skip
        prepared.append((rec, events, mw))
    if not any(mw for _, _, mw in prepared):
        raise ValueError("no MW window could be extracted")

    # FS quota per recording: its own MW count, shortfalls moved to sibling sessions
    quota = [len(mw) for _, _, mw in prepared]
    caps = [fs_capacity(rec, ev, window_seconds) for rec, ev, _ in prepared]
    for subject in sorted({rec.subject_id for rec, _, _ in prepared}):
        idx = [i for i, (rec, _, _) in enumerate(prepared) if rec.subject_id == subject]
        shortfall = sum(max(quota[i] - caps[i], 0) for i in idx)
        for i in idx:
            quota[i] = min(quota[i], caps[i])
        for i in idx:
            extra = min(shortfall, caps[i] - quota[i])
            quota[i] += extra
            shortfall -= extra
        if shortfall:
            have = sum(quota[i] for i in idx)
            raise InsufficientSpanError(
                f"subject {subject}: need {have + shortfall} FS windows, only {have} fit", have
            )

    samples = []
    for (rec, events, mw), q in zip(prepared, quota):
        fs_windows = extract_fs_windows(rec, events, window_seconds, q,
                                        recording_rng(seed, rec.subject_id, rec.session_id))
        for w in mw + fs_windows:
            w.data = zscore(w.data, zscore_mode).astype(np.float32)
            samples.append(w)
    if skipped:
        log.info("skipped %d button presses too close to the recording edges", skipped)
    return Dataset(samples, window_seconds, fs, n_channels, skipped)


# -- dataset file ------------------------------------------------------------------------

_DS_MAGIC = b"MWDS"
_DS_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIIId")


def _record_dtype(n_channels, n_timesteps):
    return np.dtype([("label", "u1"), ("subject", "u1"), ("session", "<u2"), ("offset", "<u8"),
                     ("data", "<f4", (n_channels, n_timesteps))])


def save_dataset(dataset, path):
    c, t = dataset.n_channels, dataset.n_timesteps
    rec = np.zeros(len(dataset), dtype=_record_dtype(c, t))
    for i, s in enumerate(dataset.samples):
        if s.data.shape != (c, t):
            raise ValueError(f"sample {i} has shape {s.data.shape}, expected {(c, t)}")
        rec[i] = (s.label, s.subject_id, s.session_id, s.origin_offset, s.data)
    with open(path, "wb") as fh:
        fh.write(_DS_HEADER.pack(_DS_MAGIC, _DS_VERSION, len(dataset), c, t, float(dataset.sampling_rate)))
        fh.write(rec.tobytes())


def load_dataset(path):
    buf = Path(path).read_bytes()
    if len(buf) < _DS_HEADER.size:
        raise DatasetFormatError("dataset file shorter than its header")
    magic, version, n, c, t, fs = _DS_HEADER.unpack_from(buf)
    if magic != _DS_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {_DS_MAGIC!r}")
    if version != _DS_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    dtype = _record_dtype(c, t)
    payload = buf[_DS_HEADER.size :]
    if len(payload) != n * dtype.itemsize:
        raise DatasetFormatError(
            f"dataset payload is {len(payload)} bytes, header implies {n * dtype.itemsize}"
        )
    rec = np.frombuffer(payload, dtype=dtype)
    if np.any(rec["label"] > 1):
        bad = int(np.flatnonzero(rec["label"] > 1)[0])
        raise DatasetFormatError(f"sample {bad}: label byte {rec['label'][bad]} not in {{0, 1}}")
    samples = [WindowSample(np.array(r["data"], dtype=np.float32), int(r["label"]), int(r["subject"]),
                            int(r["session"]), int(r["offset"])) for r in rec]
    return Dataset(samples, t / fs, fs, c)
