"""Recording ingestion, segment extraction, synthetic subjects, and storage.

The pipeline starts from an EDF polysomnographic recording plus a text
scoring file of sleep events. Every scored A-phase yields two 4-second
segments on one EEG channel resampled to 512 Hz: the 4 s after the onset
(labeled with the phase subtype) and the 4 s before it (labeled N),
unless that preceding window overlaps an earlier A-phase, in which case
the N segment is discarded.

Datasets are persisted in a little-endian binary container ("CAPD").
The container stores subject id, provenance, and segments only; the
channel name is construction-time metadata and is not persisted.
"""

import struct
from dataclasses import dataclass, field
from datetime import time as dtime

import numpy as np

from . import dsp
from .errors import (
    ChannelNotFoundError,
    FormatError,
    InsufficientDataError,
    TruncationError,
)

LABELS = ("N", "A1", "A2", "A3")
SUBTYPES = ("A1", "A2", "A3")
LABEL_CODES = {name: code for code, name in enumerate(LABELS)}

SEGMENT_SECONDS = 4.0
TARGET_RATE = 512.0
SEGMENT_SAMPLES = 2048

# CAP A-phases last between 2 and 60 seconds by definition; events outside
# that range are loaded but flagged.
DURATION_RANGE = (2.0, 60.0)

DEFAULT_CHANNEL_PRIORITY = ("C4-A1", "C3-A2", "C4-P4", "C3-P3")

DATASET_MAGIC = b"CAPD"
DATASET_VERSION = 1
PROVENANCE_CODES = {"real": 0, "synthetic": 1}
_CODE_PROVENANCE = {v: k for k, v in PROVENANCE_CODES.items()}


@dataclass
class EdfSignal:
    label: str
    physical_dim: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int
    samples: np.ndarray  # physical units, float64


@dataclass
class EdfRecording:
    signals: list
    n_records: int
    record_duration: float
    start_date: str
    start_time: dtime

    def labels(self):
        return [s.label for s in self.signals]

    def signal(self, label):
        for s in self.signals:
            if s.label.strip().lower() == label.strip().lower():
                return s
        raise ChannelNotFoundError(
            f"channel {label!r} not found; available: {self.labels()}"
        )


@dataclass
class AnnotationEvent:
    phase: str  # "A1" | "A2" | "A3"
    onset: float  # seconds from recording start
    duration: float
    sleep_stage: str | None = None
    out_of_range: bool = False  # duration outside the 2..60 s definition


@dataclass
class Segment:
    label: str  # "N" | "A1" | "A2" | "A3"
    onset: float
    samples: np.ndarray  # 2048 float32 values at 512 Hz
    subject_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.shape != (SEGMENT_SAMPLES,):
            raise ValueError(
                f"segment must hold exactly {SEGMENT_SAMPLES} samples, "
                f"got {self.samples.shape}"
            )
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")


@dataclass
class SubjectDataset:
    subject_id: str
    segments: list
    channel_name: str = ""
    provenance: str = "real"
    skipped_events: int = 0

    def class_counts(self):
        counts = dict.fromkeys(LABELS, 0)
        for seg in self.segments:
            counts[seg.label] += 1
        return counts

    def __len__(self):
        return len(self.segments)


# ---------------------------------------------------------------------------
# EDF parsing


def _ascii_field(data, pos, width, what):
    if pos + width > len(data):
        raise TruncationError(f"EDF truncated at byte {len(data)} while reading {what}")
    return data[pos : pos + width].decode("ascii", errors="replace").strip(), pos + width


def _numeric(text, what, convert):
    try:
        return convert(text)
    except ValueError:
        raise FormatError(f"non-numeric EDF header field {what}: {text!r}") from None


def parse_edf(data):
    """Decode an EDF byte stream into physical-unit signals.

    The 256-byte fixed header is followed by 256 header bytes per signal
    (stored field-by-field across signals) and then data records of
    little-endian 16-bit integers, mapped affinely to physical units.
    """
    if len(data) < 256:
        raise TruncationError(f"EDF shorter than its 256-byte header ({len(data)} bytes)")
    pos = 0
    _, pos = _ascii_field(data, pos, 8, "version")
    _, pos = _ascii_field(data, pos, 80, "patient id")
    _, pos = _ascii_field(data, pos, 80, "recording id")
    start_date, pos = _ascii_field(data, pos, 8, "start date")
    start_time_raw, pos = _ascii_field(data, pos, 8, "start time")
    _, pos = _ascii_field(data, pos, 8, "header bytes")
    _, pos = _ascii_field(data, pos, 44, "reserved")
    n_records_raw, pos = _ascii_field(data, pos, 8, "record count")
    duration_raw, pos = _ascii_field(data, pos, 8, "record duration")
    ns_raw, pos = _ascii_field(data, pos, 4, "signal count")

    n_records = _numeric(n_records_raw, "record count", int)
    record_duration = _numeric(duration_raw, "record duration", float)
    ns = _numeric(ns_raw, "signal count", int)
    if ns <= 0:
        raise FormatError(f"EDF declares {ns} signals")

    def column(width, what, convert=None):
        nonlocal pos
        values = []
        for i in range(ns):
            text, pos = _ascii_field(data, pos, width, f"{what}[{i}]")
            values.append(_numeric(text, f"{what}[{i}]", convert) if convert else text)
        return values

    labels = column(16, "label")
    column(80, "transducer")
    phys_dims = column(8, "physical dimension")
    phys_min = column(8, "physical min", float)
    phys_max = column(8, "physical max", float)
    dig_min = column(8, "digital min", int)
    dig_max = column(8, "digital max", int)
    column(80, "prefiltering")
    spr = column(8, "samples per record", int)
    column(32, "reserved")

    for i in range(ns):
        if dig_max[i] <= dig_min[i]:
            raise FormatError(
                f"degenerate scaling for signal {labels[i]!r}: "
                f"digital max {dig_max[i]} <= digital min {dig_min[i]}"
            )
        if spr[i] <= 0:
            raise FormatError(f"signal {labels[i]!r} declares {spr[i]} samples per record")

    record_values = sum(spr)
    record_bytes = 2 * record_values
    body = len(data) - pos
    if n_records < 0:  # unknown count: infer from the file length
        n_records = body // record_bytes
    expected = n_records * record_bytes
    if body < expected:
        raise TruncationError(
            f"EDF truncated at byte {len(data)}: expected {pos + expected} bytes "
            f"for {n_records} records"
        )
    raw = np.frombuffer(data, dtype="<i2", count=n_records * record_values, offset=pos)
    raw = raw.reshape(n_records, record_values)

    signals = []
    offset = 0
    for i in range(ns):
        digital = raw[:, offset : offset + spr[i]].reshape(-1).astype(np.float64)
        offset += spr[i]
        scale = (phys_max[i] - phys_min[i]) / (dig_max[i] - dig_min[i])
        physical = (digital - dig_min[i]) * scale + phys_min[i]
        signals.append(
            EdfSignal(
                label=labels[i],
                physical_dim=phys_dims[i],
                physical_min=phys_min[i],
                physical_max=phys_max[i],
                digital_min=dig_min[i],
                digital_max=dig_max[i],
                samples_per_record=spr[i],
                samples=physical,
            )
        )
    return EdfRecording(
        signals=signals,
        n_records=n_records,
        record_duration=record_duration,
        start_date=start_date,
        start_time=_parse_edf_time(start_time_raw),
    )


def _parse_edf_time(text):
    parts = text.replace(":", ".").split(".")
    if len(parts) != 3:
        raise FormatError(f"bad EDF start time {text!r}")
    try:
        h, m, s = (int(p) for p in parts)
        return dtime(h, m, s)
    except ValueError:
        raise FormatError(f"bad EDF start time {text!r}") from None


# ---------------------------------------------------------------------------
# Annotation parsing


def time_of_day_seconds(value):
    """Seconds since midnight from a time, a number, or 'hh:mm:ss[.fff]'."""
    if isinstance(value, dtime):
        return value.hour * 3600 + value.minute * 60 + value.second + value.microsecond / 1e6
    if isinstance(value, (int, float)):
        return float(value)
    parts = str(value).strip().replace(".", ":").split(":", maxsplit=2)
    if len(parts) != 3:
        raise ValueError(f"cannot interpret time of day {value!r}")
    h, m = int(parts[0]), int(parts[1])
    s = float(parts[2])
    return h * 3600 + m * 60 + s


def _phase_code(text):
    text = text.strip().upper()
    for sub in SUBTYPES:
        if sub in text:
            return sub
    return None


def parse_cap_annotations(text, start_time):
    """Extract A-phase events from a tab-separated scoring file.

    The file consists of free-form metadata lines followed by a header
    row naming the columns (the parser keys on the Event and Duration
    columns, so column order does not matter), followed by one row per
    scored event. Rows whose event code contains A1, A2 or A3 become
    events; everything else (sleep stages, body position, artifacts) is
    ignored. Onsets are converted to seconds from the recording start,
    wrapping past midnight.
    """
    start_s = time_of_day_seconds(start_time)
    events = []
    columns = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line:
            continue
        fields = [f.strip() for f in line.split("\t")]
        if columns is None:
            lowered = [f.lower() for f in fields]
            event_col = next((i for i, f in enumerate(lowered) if f.startswith("event")), None)
            dur_col = next((i for i, f in enumerate(lowered) if f.startswith("duration")), None)
            if event_col is not None and dur_col is not None:
                time_col = next((i for i, f in enumerate(lowered) if f.startswith("time")), None)
                stage_col = next((i for i, f in enumerate(lowered) if "stage" in f), None)
                if time_col is None:
                    raise FormatError(f"line {lineno}: header row has no time column")
                columns = (event_col, time_col, dur_col, stage_col)
                continue
            phase_field = any(
                (code := _phase_code(f)) and f.upper().endswith(code) for f in fields
            )
            if len(fields) >= 3 and phase_field and _looks_like_event_row(fields):
                raise FormatError(f"line {lineno}: event row before any header")
            continue
        event_col, time_col, dur_col, stage_col = columns
        if len(fields) <= max(event_col, time_col, dur_col):
            continue
        phase = _phase_code(fields[event_col])
        if phase is None:
            continue
        try:
            onset_of_day = time_of_day_seconds(fields[time_col])
        except ValueError:
            raise FormatError(
                f"line {lineno}: unparseable time field {fields[time_col]!r}"
            ) from None
        try:
            duration = float(fields[dur_col])
        except ValueError:
            raise FormatError(
                f"line {lineno}: unparseable duration {fields[dur_col]!r}"
            ) from None
        onset = onset_of_day - start_s
        if onset < 0:
            onset += 86400.0
        lo, hi = DURATION_RANGE
        events.append(
            AnnotationEvent(
                phase=phase,
                onset=onset,
                duration=duration,
                sleep_stage=fields[stage_col] if stage_col is not None
                and stage_col < len(fields) else None,
                out_of_range=not lo <= duration <= hi,
            )
        )
    return events


def _looks_like_event_row(fields):
    for f in fields:
        try:
            time_of_day_seconds(f)
            return True
        except ValueError:
            continue
    return False


# ---------------------------------------------------------------------------
# Segment extraction


def select_channel(recording, priority=DEFAULT_CHANNEL_PRIORITY):
    """First channel from the priority list, else the first EEG-looking one."""
    labels = {s.label.strip().lower(): s.label for s in recording.signals}
    for wanted in priority:
        if wanted.strip().lower() in labels:
            return labels[wanted.strip().lower()]
    for s in recording.signals:
        if "eeg" in s.label.lower():
            return s.label
    raise ChannelNotFoundError(
        f"no channel from {list(priority)} and no EEG-labeled channel; "
        f"available: {recording.labels()}"
    )


def extract_segments(recording, events, channel=None, subject_id=""):
    """Cut the 4 s A and N segments for every annotated A-phase.

    The chosen channel is resampled to 512 Hz when needed. For an event
    at onset t the A segment covers [t, t+4) and is labeled with the
    subtype; the N segment covers [t-4, t) unless that window overlaps
    an earlier A-phase interval [onset_i, onset_i + duration_i), in which
    case it is discarded. Segments whose windows fall outside the
    recording are skipped and counted in ``skipped_events``.
    """
    if channel is None:
        channel = select_channel(recording)
    sig = recording.signal(channel)
    rate = sig.samples_per_record / recording.record_duration
    samples = sig.samples
    if rate != TARGET_RATE:
        samples = dsp.cubic_spline_resample(samples, rate, TARGET_RATE)
    samples = samples.astype(np.float32)

    ordered = sorted(events, key=lambda e: e.onset)
    segments = []
    skipped = 0
    for i, event in enumerate(ordered):
        start = int(round(event.onset * TARGET_RATE))
        if start < 0 or start + SEGMENT_SAMPLES > samples.size:
            skipped += 1
            continue
        segments.append(
            Segment(
                label=event.phase,
                onset=event.onset,
                samples=samples[start : start + SEGMENT_SAMPLES],
                subject_id=subject_id,
            )
        )
        n_start = start - SEGMENT_SAMPLES
        if n_start < 0:
            skipped += 1
            continue
        window_start = event.onset - SEGMENT_SECONDS
        overlaps = any(
            prev.onset < event.onset and prev.onset + prev.duration > window_start
            for prev in ordered[:i]
        )
        if overlaps:
            continue
        segments.append(
            Segment(
                label="N",
                onset=window_start,
                samples=samples[n_start:start],
                subject_id=subject_id,
            )
        )
    return SubjectDataset(
        subject_id=subject_id,
        segments=segments,
        channel_name=channel,
        provenance="real",
        skipped_events=skipped,
    )


# ---------------------------------------------------------------------------
# Synthetic subjects


def _pink_noise(rng, n, rms):
    """1/f-amplitude noise with the DC component removed."""
    spectrum = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    freqs = np.fft.rfftfreq(n, d=1.0 / TARGET_RATE)
    shaping = np.zeros_like(freqs)
    shaping[1:] = 1.0 / np.sqrt(freqs[1:])
    x = np.fft.irfft(spectrum * shaping, n)
    return x * (rms / np.sqrt(np.mean(x**2)))


def _band_burst(rng, n, f_lo, f_hi, amplitude, cover):
    """Sum of three in-band sinusoids under a tapered envelope.

    ``cover`` is the fraction of the window the burst occupies; the
    envelope ramps up and down with half-cosines over 10% of the burst.
    """
    t = np.arange(n) / TARGET_RATE
    duration = n / TARGET_RATE
    burst_len = cover * duration
    start = rng.uniform(0.0, duration - burst_len)
    env = np.zeros(n)
    inside = (t >= start) & (t < start + burst_len)
    phase = (t[inside] - start) / burst_len  # 0..1 across the burst
    ramp = np.minimum(1.0, np.minimum(phase, 1.0 - phase) / 0.1)
    env[inside] = 0.5 - 0.5 * np.cos(np.pi * ramp)
    sig = np.zeros(n)
    for _ in range(3):
        f = rng.uniform(f_lo, f_hi)
        sig += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return amplitude / np.sqrt(3.0) * env * sig


def _synthetic_segment(rng, label):
    n = SEGMENT_SAMPLES
    x = _pink_noise(rng, n, rms=5.0)
    gain = rng.uniform(0.9, 1.15)
    if label == "A1":
        x += _band_burst(rng, n, 0.5, 4.0, 50.0 * gain, rng.uniform(0.85, 0.95))
    elif label == "A2":
        x += _band_burst(rng, n, 0.5, 4.0, 35.0 * gain, rng.uniform(0.6, 0.8))
        x += _band_burst(rng, n, 8.0, 30.0, 45.0 * gain, rng.uniform(0.3, 0.45))
    elif label == "A3":
        x += _band_burst(rng, n, 8.0, 30.0, 50.0 * gain, rng.uniform(0.7, 0.95))
    return x.astype(np.float32)


def synthesize_subject(rng, counts, subject_id="synthetic"):
    """Generate a dataset whose classes are separable by spectral content.

    N segments are pink-noise background; A1 adds strong slow (0.5-4 Hz)
    bursts; A2 mixes slow bursts with 8-30 Hz activity covering 20-50%
    of the window; A3 is dominated by 8-30 Hz activity covering more
    than half the window. ``counts`` maps labels to segment counts;
    missing labels default to 0. Deterministic given the seed.
    """
    rng = np.random.default_rng(rng)
    for key, value in counts.items():
        if key not in LABELS:
            raise ValueError(f"unknown label {key!r}")
        if value < 0:
            raise ValueError(f"negative count for {key}")
    segments = []
    onset_step = 8.0
    i = 0
    for label in LABELS:
        for _ in range(counts.get(label, 0)):
            segments.append(
                Segment(
                    label=label,
                    onset=i * onset_step,
                    samples=_synthetic_segment(rng, label),
                    subject_id=subject_id,
                )
            )
            i += 1
    return SubjectDataset(
        subject_id=subject_id,
        segments=segments,
        channel_name="",
        provenance="synthetic",
    )


# ---------------------------------------------------------------------------
# Dataset container


def write_dataset(ds, sink):
    """Serialize a dataset to the binary container.

    Layout (little-endian): magic "CAPD", version u32, subject id
    (u16 length + UTF-8), provenance u8, segment count u32, then per
    segment: label u8 (0=N, 1=A1, 2=A2, 3=A3), onset f64, 2048 f32
    samples.
    """
    own = isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__")
    f = open(sink, "wb") if own else sink
    try:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        sid = ds.subject_id.encode("utf-8")
        f.write(struct.pack("<H", len(sid)))
        f.write(sid)
        f.write(struct.pack("<B", PROVENANCE_CODES[ds.provenance]))
        f.write(struct.pack("<I", len(ds.segments)))
        for seg in ds.segments:
            f.write(struct.pack("<B", LABEL_CODES[seg.label]))
            f.write(struct.pack("<d", seg.onset))
            f.write(np.ascontiguousarray(seg.samples, dtype="<f4").tobytes())
    finally:
        if own:
            f.close()


def read_dataset(source):
    """Inverse of ``write_dataset``. The channel name is not persisted."""
    own = isinstance(source, (str, bytes)) or hasattr(source, "__fspath__")
    f = open(source, "rb") if own else source
    try:
        data = f.read()
    finally:
        if own:
            f.close()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise TruncationError(f"dataset truncated at byte {len(data)}: {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    (sid_len,) = struct.unpack("<H", take(2, "subject id length"))
    subject_id = take(sid_len, "subject id").decode("utf-8")
    (prov,) = struct.unpack("<B", take(1, "provenance"))
    if prov not in _CODE_PROVENANCE:
        raise FormatError(f"unknown provenance code {prov}")
    (count,) = struct.unpack("<I", take(4, "segment count"))
    segments = []
    for i in range(count):
        (code,) = struct.unpack("<B", take(1, f"segment {i} label"))
        if code >= len(LABELS):
            raise FormatError(f"unknown label code {code} in segment {i}")
        (onset,) = struct.unpack("<d", take(8, f"segment {i} onset"))
        raw = take(4 * SEGMENT_SAMPLES, f"segment {i} samples")
        samples = np.frombuffer(raw, dtype="<f4").copy()
        segments.append(
            Segment(label=LABELS[code], onset=onset, samples=samples,
                    subject_id=subject_id)
        )
    return SubjectDataset(
        subject_id=subject_id,
        segments=segments,
        channel_name="",
        provenance=_CODE_PROVENANCE[prov],
    )
