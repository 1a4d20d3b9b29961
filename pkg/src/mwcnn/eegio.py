"""Reading EEG recordings (Biosemi BDF, the internal MWER format) and event sidecars."""

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EVENT_KINDS = ("button_press", "counting_start", "question_start", "question_end")


class EegFormatError(ValueError):
    """A recording or sidecar file is malformed."""


@dataclass
class Event:
    sample_index: int
    kind: str
    session_id: int = 0


@dataclass
class EegRecording:
    data: np.ndarray  # [n_channels, n_samples], microvolts, float32
    sampling_rate: float
    channel_labels: list
    subject_id: int = 0
    session_id: int = 0
    # half-open sample range whose values are trustworthy (filter edges excluded)
    valid_range: tuple = field(default=None)

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"recording data must be [n_channels >= 1, n_samples], got {self.data.shape}")
        if self.sampling_rate <= 0:
            raise ValueError(f"sampling rate must be positive, got {self.sampling_rate}")
        if len(self.channel_labels) != self.data.shape[0]:
            raise ValueError(
                f"{len(self.channel_labels)} channel labels for {self.data.shape[0]} channels"
            )
        if self.valid_range is None:
            self.valid_range = (0, self.data.shape[1])

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]


# -- BDF ---------------------------------------------------------------------------


def decode_int24(b):
    """Little-endian 24-bit two's complement to int."""
    if len(b) != 3:
        raise ValueError(f"need exactly 3 bytes, got {len(b)}")
    return int.from_bytes(bytes(b), "little", signed=True)


def decode_int24_array(buf):
    """Vectorised :func:`decode_int24` over a byte buffer whose length is a multiple of 3."""
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
    value = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
    return np.where(value >= 1 << 23, value - (1 << 24), value)


def encode_int24_array(values):
    v = np.asarray(values, dtype=np.int64)
    if v.size and (v.min() < -(1 << 23) or v.max() >= 1 << 23):
        raise ValueError("value out of 24-bit range")
    u = (v & 0xFFFFFF).astype(np.uint32)
    out = np.empty((v.size, 3), dtype=np.uint8)
    out[:, 0] = u & 0xFF
    out[:, 1] = (u >> 8) & 0xFF
    out[:, 2] = (u >> 16) & 0xFF
    return out.tobytes()


_BDF_MAGIC = b"\xffBIOSEMI"
_CHANNEL_FIELDS = (  # name, width
    ("label", 16), ("transducer", 80), ("physical_dimension", 8), ("physical_minimum", 8),
    ("physical_maximum", 8), ("digital_minimum", 8), ("digital_maximum", 8),
    ("prefiltering", 80), ("samples_per_record", 8), ("reserved", 32),
)


def _field_num(raw, name, cast=float):
    text = raw.decode("ascii", errors="replace").strip()
    try:
        return cast(text)
    except ValueError:
        raise EegFormatError(f"BDF header field {name!r} is not numeric: {text!r}") from None


def bdf_gain(phys_min, phys_max, dig_min, dig_max):
    return (phys_max - phys_min) / (dig_max - dig_min)


def read_bdf(path, subject_id=0, session_id=0):
    """Parse a BDF file into an :class:`EegRecording` in physical units."""
    buf = Path(path).read_bytes()
    if len(buf) < 256:
        raise EegFormatError("BDF file shorter than its 256-byte main header")
    if buf[:8] != _BDF_MAGIC:
        raise EegFormatError("bad BDF identification: expected 0xFF 'BIOSEMI'")
    header_bytes = _field_num(buf[184:192], "header_bytes", int)
    n_records = _field_num(buf[236:244], "n_records", int)
    duration = _field_num(buf[244:252], "record_duration")
    n_signals = _field_num(buf[252:256], "n_signals", int)
    if n_signals < 1:
        raise EegFormatError(f"BDF header field 'n_signals' must be >= 1, got {n_signals}")
    if header_bytes != 256 * (n_signals + 1):
        raise EegFormatError(
            f"BDF header field 'header_bytes' is {header_bytes}, expected {256 * (n_signals + 1)}"
        )
    if len(buf) < header_bytes:
        raise EegFormatError("BDF file truncated inside the channel headers")
    if n_records < 0:
        raise EegFormatError("BDF header field 'n_records' is -1 (unknown); not supported")
    if duration <= 0:
        raise EegFormatError(f"BDF header field 'record_duration' must be positive, got {duration}")

    fields = {}
    pos = 256
    for name, width in _CHANNEL_FIELDS:
        fields[name] = [buf[pos + i * width : pos + (i + 1) * width] for i in range(n_signals)]
        pos += width * n_signals
    labels = [f.decode("ascii", errors="replace").strip() for f in fields["label"]]
    spr = [_field_num(f, "samples_per_record", int) for f in fields["samples_per_record"]]
    if len(set(spr)) != 1 or spr[0] < 1:
        raise EegFormatError(f"BDF header field 'samples_per_record' inconsistent across channels: {spr}")
    spr = spr[0]
    phys_min = np.array([_field_num(f, "physical_minimum") for f in fields["physical_minimum"]])
    phys_max = np.array([_field_num(f, "physical_maximum") for f in fields["physical_maximum"]])
    dig_min = np.array([_field_num(f, "digital_minimum") for f in fields["digital_minimum"]])
    dig_max = np.array([_field_num(f, "digital_maximum") for f in fields["digital_maximum"]])
    if np.any(dig_max <= dig_min):
        raise EegFormatError("BDF header field 'digital_maximum' must exceed 'digital_minimum'")

    record_bytes = n_signals * spr * 3
    payload = buf[header_bytes:]
    if len(payload) < n_records * record_bytes:
        raise EegFormatError(
            f"BDF data truncated: header field 'n_records' declares {n_records} records "
            f"({n_records * record_bytes} bytes), found {len(payload)} bytes"
        )
    digital = decode_int24_array(payload[: n_records * record_bytes])
    # records, then channels, then samples
    digital = digital.reshape(n_records, n_signals, spr).transpose(1, 0, 2).reshape(n_signals, -1)
    gain = bdf_gain(phys_min, phys_max, dig_min, dig_max)
    phys = phys_min[:, None] + (digital - dig_min[:, None]) * gain[:, None]
    return EegRecording(phys.astype(np.float32), spr / duration, labels, subject_id, session_id)


def _ascii(value, width):
    text = str(value)
    if len(text) > width:
        raise ValueError(f"{text!r} does not fit in {width} header bytes")
    return text.ljust(width).encode("ascii")


def write_bdf(path, digital, sampling_rate, labels=None, phys_min=-262144.0, phys_max=262143.0,
              dig_min=-8388608, dig_max=8388607, record_seconds=1):
    """Write integer samples ``[n_channels, n_samples]`` as a BDF file.

    ``n_samples`` must be a whole number of records.  Used to build fixtures;
    real recordings come from the acquisition system.
    """
    digital = np.asarray(digital, dtype=np.int64)
    n_signals, n_samples = digital.shape
    spr = int(round(sampling_rate * record_seconds))
    if n_samples % spr:
        raise ValueError(f"{n_samples} samples is not a whole number of {spr}-sample records")
    n_records = n_samples // spr
    labels = labels or [f"Ch{i + 1}" for i in range(n_signals)]
    head = b"".join([
        _BDF_MAGIC,
        _ascii("", 80), _ascii("", 80), _ascii("01.01.20", 8), _ascii("00.00.00", 8),
        _ascii(256 * (n_signals + 1), 8), _ascii("24BIT", 44), _ascii(n_records, 8),
        _ascii(record_seconds, 8), _ascii(n_signals, 4),
    ])
    per_channel = {
        "label": labels, "transducer": [""] * n_signals, "physical_dimension": ["uV"] * n_signals,
        "physical_minimum": [_fmt(phys_min)] * n_signals, "physical_maximum": [_fmt(phys_max)] * n_signals,
        "digital_minimum": [int(dig_min)] * n_signals, "digital_maximum": [int(dig_max)] * n_signals,
        "prefiltering": [""] * n_signals, "samples_per_record": [spr] * n_signals,
        "reserved": [""] * n_signals,
    }
    for name, width in _CHANNEL_FIELDS:
        head += b"".join(_ascii(v, width) for v in per_channel[name])
    body = digital.reshape(n_signals, n_records, spr).transpose(1, 0, 2)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(encode_int24_array(body.ravel()))


def _fmt(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


# -- internal raw matrix -----------------------------------------------------------

_RAW_MAGIC = b"MWER"
_RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIIIdBH")


def write_raw_matrix(recording, path):
    data = np.ascontiguousarray(recording.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(_RAW_MAGIC, _RAW_VERSION, data.shape[0], data.shape[1],
                                  float(recording.sampling_rate), recording.subject_id,
                                  recording.session_id))
        fh.write(data.tobytes())
        fh.write("\n".join(recording.channel_labels).encode("utf-8"))


def read_raw_matrix(path):
    buf = Path(path).read_bytes()
    if len(buf) < _RAW_HEADER.size:
        raise EegFormatError("raw matrix file shorter than its header")
    magic, version, n_channels, n_samples, rate, subject, session = _RAW_HEADER.unpack_from(buf)
    if magic != _RAW_MAGIC:
        raise EegFormatError(f"bad magic {magic!r}, expected {_RAW_MAGIC!r}")
    if version != _RAW_VERSION:
        raise EegFormatError(f"unsupported raw matrix version {version}")
    if n_channels < 1:
        raise EegFormatError("raw matrix declares no channels")
    n_bytes = n_channels * n_samples * 4
    start = _RAW_HEADER.size
    if len(buf) < start + n_bytes:
        raise EegFormatError(
            f"payload holds {(len(buf) - start) // 4} values, header declares {n_channels}x{n_samples}"
        )
    data = np.frombuffer(buf[start : start + n_bytes], dtype="<f4").reshape(n_channels, n_samples)
    labels = buf[start + n_bytes :].decode("utf-8").split("\n")
    if len(labels) != n_channels:
        raise EegFormatError(f"{len(labels)} channel labels for {n_channels} channels")
    return EegRecording(data.astype(np.float32), rate, labels, subject, session)


def read_recording(path, subject_id=None, session_id=None):
    """Dispatch on extension: ``.bdf`` or the internal raw format."""
    path = Path(path)
    if path.suffix.lower() == ".bdf":
        return read_bdf(path, subject_id or 0, session_id or 0)
    rec = read_raw_matrix(path)
    if subject_id is not None:
        rec.subject_id = subject_id
    if session_id is not None:
        rec.session_id = session_id
    return rec


# -- events sidecar ------------------------------------------------------------------


def read_events_csv(path):
    """Events sorted by (session, sample index)."""
    events = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"session_id", "sample_index", "kind"} - set(reader.fieldnames or ())
        if missing:
            raise EegFormatError(f"{path}: events CSV missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            kind = row["kind"].strip()
            if kind not in EVENT_KINDS:
                raise EegFormatError(f"{path}: row {row_no}: unknown event kind {kind!r}")
            try:
                index = int(row["sample_index"])
                session = int(row["session_id"])
            except ValueError:
                raise EegFormatError(f"{path}: row {row_no}: non-integer field") from None
            if index < 0:
                raise EegFormatError(f"{path}: row {row_no}: negative sample_index {index}")
            events.append(Event(index, kind, session))
    events.sort(key=lambda e: (e.session_id, e.sample_index))
    return events


def write_events_csv(events, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session_id", "sample_index", "kind"])
        for e in events:
            w.writerow([e.session_id, e.sample_index, e.kind])
