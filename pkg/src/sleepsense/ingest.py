"""Recording ingestion: EDF/EDF+ files, hypnograms, CSV exports, epochs and splits."""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import enum
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import yaml

from .errors import (
    DataError,
    InconsistentRecord,
    InsufficientEpochs,
    InvalidActivityCode,
    MalformedHeader,
    MissingColumn,
    NoAnnotationCoverage,
    NonMonotonicTimestamps,
    NonNumericCell,
    OverlappingAnnotations,
    UnknownChannel,
    UnknownLabel,
    ZeroDigitalRange,
)

ANNOTATION_LABEL = "EDF Annotations"


class SleepStage(enum.IntEnum):
    WAKE = 0
    STAGE1 = 1
    STAGE2 = 2
    STAGE34 = 3
    REM = 4
    UNKNOWN_OR_MOVEMENT = 5

    @property
    def text(self) -> str:
        return str(int(self))

    @property
    def short(self) -> str:
        return ("W", "1", "2", "3&4", "REM", "?")[int(self)]

    @classmethod
    def parse(cls, value) -> "SleepStage":
        if isinstance(value, SleepStage):
            return value
        key = str(value).strip().lower()
        if key in _STAGE_SYNONYMS:
            return _STAGE_SYNONYMS[key]
        try:
            number = float(key)
        except ValueError:
            raise UnknownLabel(f"unrecognised sleep stage {value!r}") from None
        if number.is_integer() and 0 <= number <= 5:
            return cls(int(number))
        raise UnknownLabel(f"unrecognised sleep stage {value!r}")


_STAGE_SYNONYMS = {
    "w": SleepStage.WAKE,
    "wake": SleepStage.WAKE,
    "awake": SleepStage.WAKE,
    "wakefulness": SleepStage.WAKE,
    "n1": SleepStage.STAGE1,
    "s1": SleepStage.STAGE1,
    "stage 1": SleepStage.STAGE1,
    "stage1": SleepStage.STAGE1,
    "n2": SleepStage.STAGE2,
    "s2": SleepStage.STAGE2,
    "stage 2": SleepStage.STAGE2,
    "stage2": SleepStage.STAGE2,
    "n3": SleepStage.STAGE34,
    "s3": SleepStage.STAGE34,
    "s4": SleepStage.STAGE34,
    "stage 3": SleepStage.STAGE34,
    "stage 4": SleepStage.STAGE34,
    "stage 3 or 4": SleepStage.STAGE34,
    "stage 3&4": SleepStage.STAGE34,
    "stage 3 & 4": SleepStage.STAGE34,
    "3&4": SleepStage.STAGE34,
    "slow wave sleep": SleepStage.STAGE34,
    "sws": SleepStage.STAGE34,
    "r": SleepStage.REM,
    "rem": SleepStage.REM,
    "rem sleep": SleepStage.REM,
    "unknown": SleepStage.UNKNOWN_OR_MOVEMENT,
    "movement": SleepStage.UNKNOWN_OR_MOVEMENT,
    "unknown or movement": SleepStage.UNKNOWN_OR_MOVEMENT,
    "?": SleepStage.UNKNOWN_OR_MOVEMENT,
}


class AttentionState(enum.IntEnum):
    FOCUSED = 0
    UNFOCUSED = 1

    @property
    def text(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "AttentionState":
        if isinstance(value, AttentionState):
            return value
        key = str(value).strip().lower()
        # drowsy is merged into unfocused
        if key in ("focused", "focus", "attentive", "0", "0.0"):
            return cls.FOCUSED
        if key in ("unfocused", "not focused", "drowsy", "inattentive", "distracted", "1", "2", "1.0", "2.0"):
            return cls.UNFOCUSED
        raise UnknownLabel(f"unrecognised attention state {value!r}")


HYPNOGRAM_LABELS = {
    "Sleep stage W": SleepStage.WAKE,
    "Sleep stage 1": SleepStage.STAGE1,
    "Sleep stage 2": SleepStage.STAGE2,
    "Sleep stage 3": SleepStage.STAGE34,
    "Sleep stage 4": SleepStage.STAGE34,
    "Sleep stage R": SleepStage.REM,
    "Movement time": SleepStage.UNKNOWN_OR_MOVEMENT,
    "Sleep stage ?": SleepStage.UNKNOWN_OR_MOVEMENT,
}


@dataclass(frozen=True)
class ChannelSeries:
    name: str
    sample_rate_hz: float
    samples: np.ndarray
    unit: str = "uV"

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise DataError(f"channel {self.name!r}: sample rate must be positive")
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError(f"channel {self.name!r}: needs a non-empty 1-D sample array")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class EdfAnnotation:
    """One raw TAL entry from an EDF+ annotation signal."""

    onset_s: float
    duration_s: float
    text: str


@dataclass(frozen=True)
class StageAnnotation:
    onset_s: float
    duration_s: float
    stage: SleepStage

    @property
    def label(self):
        return self.stage

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s


@dataclass(frozen=True)
class LabelSpan:
    """A labelled stretch of time; the generic counterpart of StageAnnotation."""

    onset_s: float
    duration_s: float
    label: object

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s


@dataclass(frozen=True)
class Recording:
    channels: tuple
    start_time: dt.datetime
    subject_id: str
    source: str  # "EDF" or "CSV"
    annotations: tuple = ()
    header: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if self.source not in ("EDF", "CSV"):
            raise DataError(f"unknown recording source {self.source!r}")
        if self.channels:
            spans = [c.duration_s for c in self.channels]
            tol = max(1.0 / c.sample_rate_hz for c in self.channels)
            if max(spans) - min(spans) > tol + 1e-9:
                raise DataError("channels do not cover the same time span")

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.channels]

    def channel(self, name: str) -> ChannelSeries:
        for c in self.channels:
            if c.name == name:
                return c
        raise UnknownChannel(f"no channel named {name!r}; have {self.channel_names}")

    def select(self, names: Sequence[str]) -> "Recording":
        return Recording(
            channels=tuple(self.channel(n) for n in names),
            start_time=self.start_time,
            subject_id=self.subject_id,
            source=self.source,
            annotations=self.annotations,
            header=self.header,
        )

    @property
    def duration_s(self) -> float:
        return min(c.duration_s for c in self.channels) if self.channels else 0.0


# ---------------------------------------------------------------------------
# EDF / EDF+

_SIGNAL_FIELDS = (
    ("label", 16, False),
    ("transducer", 80, False),
    ("physical_dimension", 8, False),
    ("physical_min", 8, True),
    ("physical_max", 8, True),
    ("digital_min", 8, True),
    ("digital_max", 8, True),
    ("prefilter", 80, False),
    ("n_samples", 8, True),
    ("reserved", 32, False),
)


def _text_field(raw: bytes) -> str:
    return raw.decode("latin-1").strip()


def _numeric_field(raw: bytes, name: str, integer: bool = False):
    try:
        text = raw.decode("ascii").strip()
    except UnicodeDecodeError:
        raise MalformedHeader(f"non-ASCII bytes in numeric field {name!r}") from None
    try:
        value = float(text)
    except ValueError:
        raise MalformedHeader(f"field {name!r} is not numeric: {text!r}") from None
    if integer:
        if not value.is_integer():
            raise MalformedHeader(f"field {name!r} must be an integer: {text!r}")
        return int(value)
    return value


def _parse_start(date_text: str, time_text: str) -> dt.datetime:
    try:
        day, month, year = (int(p) for p in date_text.split("."))
        hour, minute, second = (int(p) for p in time_text.split("."))
    except ValueError:
        raise MalformedHeader(f"bad start date/time {date_text!r} {time_text!r}") from None
    # EDF clipping date: yy >= 85 means 19yy
    year += 1900 if year >= 85 else 2000
    try:
        return dt.datetime(year, month, day, hour, minute, second, tzinfo=dt.timezone.utc)
    except ValueError as exc:
        raise MalformedHeader(f"bad start date/time: {exc}") from None


def _parse_header(data: bytes) -> dict:
    if len(data) < 256:
        raise MalformedHeader("file shorter than the 256-byte fixed header")
    pos = 0

    def take(width):
        nonlocal pos
        chunk = data[pos : pos + width]
        pos += width
        return chunk

    header = {
        "version": _text_field(take(8)),
        "patient": _text_field(take(80)),
        "recording": _text_field(take(80)),
    }
    start_date = _text_field(take(8))
    start_time = _text_field(take(8))
    header["header_bytes"] = _numeric_field(take(8), "header_bytes", integer=True)
    header["reserved"] = _text_field(take(44))
    header["n_records"] = _numeric_field(take(8), "n_records", integer=True)
    header["record_duration_s"] = _numeric_field(take(8), "record_duration")
    header["n_signals"] = ns = _numeric_field(take(4), "n_signals", integer=True)
    header["start_time"] = _parse_start(start_date, start_time)
    if ns < 1:
        raise MalformedHeader("header declares no signals")
    if header["header_bytes"] != 256 * (ns + 1):
        raise MalformedHeader(
            f"header size {header['header_bytes']} does not match {ns} signals"
        )
    if len(data) < header["header_bytes"]:
        raise MalformedHeader("file shorter than its declared header")
    if header["record_duration_s"] < 0:
        raise MalformedHeader("negative data record duration")

    signals = [dict() for _ in range(ns)]
    for name, width, numeric in _SIGNAL_FIELDS:
        for sig in signals:
            raw = take(width)
            if numeric:
                sig[name] = _numeric_field(raw, name, integer=name in ("digital_min", "digital_max", "n_samples"))
            else:
                sig[name] = _text_field(raw)
    for sig in signals:
        if sig["n_samples"] < 1:
            raise MalformedHeader(f"signal {sig['label']!r} has no samples per record")
    header["signals"] = signals
    return header


def _parse_tal_block(block: bytes) -> list[EdfAnnotation]:
    out = []
    for tal in block.split(b"\x00"):
        if not tal:
            continue
        parts = tal.split(b"\x14")
        timing = parts[0].decode("utf-8", errors="replace")
        if not timing or timing[0] not in "+-":
            continue
        onset_text, _, duration_text = timing.partition("\x15")
        try:
            onset = float(onset_text)
            duration = float(duration_text) if duration_text else 0.0
        except ValueError:
            raise DataError(f"malformed TAL timing {timing!r}") from None
        for text in parts[1:]:
            text = text.decode("utf-8", errors="replace").strip()
            if text:
                out.append(EdfAnnotation(onset, duration, text))
    return out


def _parse_edf(data: bytes):
    header = _parse_header(data)
    signals = header["signals"]
    spr = [s["n_samples"] for s in signals]
    record_bytes = 2 * sum(spr)
    body = len(data) - header["header_bytes"]
    n_records = header["n_records"]
    if n_records == -1:
        if body % record_bytes:
            raise InconsistentRecord("file length is not a whole number of data records")
        n_records = body // record_bytes
    elif n_records < 0:
        raise MalformedHeader(f"invalid record count {n_records}")
    if n_records * record_bytes != body:
        raise InconsistentRecord(
            f"{n_records} records x {record_bytes} bytes != {body} data bytes"
        )
    header["n_records"] = n_records
    raw = np.frombuffer(data, dtype="<i2", count=n_records * sum(spr), offset=header["header_bytes"])
    raw = raw.reshape(n_records, sum(spr))

    channels = []
    annotations = []
    offset = 0
    for sig, n in zip(signals, spr):
        block = raw[:, offset : offset + n]
        offset += n
        if sig["label"] == ANNOTATION_LABEL:
            for record in block:
                annotations.extend(_parse_tal_block(record.tobytes()))
            continue
        dig_lo, dig_hi = sig["digital_min"], sig["digital_max"]
        if dig_hi == dig_lo:
            raise ZeroDigitalRange(f"signal {sig['label']!r} has digital min == max")
        if header["record_duration_s"] <= 0:
            raise MalformedHeader("data signals require a positive record duration")
        phys_lo, phys_hi = sig["physical_min"], sig["physical_max"]
        gain = (phys_hi - phys_lo) / (dig_hi - dig_lo)
        samples = phys_lo + (block.reshape(-1).astype(np.float64) - dig_lo) * gain
        channels.append(
            ChannelSeries(
                name=sig["label"],
                sample_rate_hz=n / header["record_duration_s"],
                samples=samples,
                unit=sig["physical_dimension"],
            )
        )
    return header, channels, annotations


def parse_edf(data: bytes, subject_id: str | None = None) -> Recording:
    """Parse an EDF or EDF+ file held in memory into a calibrated Recording.

    The annotation signal of EDF+ files is not returned as a channel; its TAL
    entries are kept in ``Recording.annotations``.
    """
    header, channels, annotations = _parse_edf(bytes(data))
    if subject_id is None:
        subject_id = header["patient"].split(" ")[0] if header["patient"] else "unknown"
    return Recording(
        channels=tuple(channels),
        start_time=header["start_time"],
        subject_id=subject_id,
        source="EDF",
        annotations=tuple(annotations),
        header=header,
    )


def read_edf(path, subject_id: str | None = None) -> Recording:
    with open(path, "rb") as fh:
        return parse_edf(fh.read(), subject_id=subject_id)


def stage_annotations(events: Iterable[EdfAnnotation], label_map: dict | None = None) -> list[StageAnnotation]:
    label_map = HYPNOGRAM_LABELS if label_map is None else label_map
    out = []
    for ev in events:
        if ev.text not in label_map:
            raise UnknownLabel(f"unmapped hypnogram label {ev.text!r}")
        if ev.duration_s <= 0:
            raise DataError(f"annotation {ev.text!r} at {ev.onset_s}s has no duration")
        out.append(StageAnnotation(ev.onset_s, ev.duration_s, label_map[ev.text]))
    out.sort(key=lambda a: a.onset_s)
    for prev, cur in zip(out, out[1:]):
        if cur.onset_s < prev.end_s - 1e-9:
            raise OverlappingAnnotations(
                f"annotation at {cur.onset_s}s starts before the previous one ends ({prev.end_s}s)"
            )
    return out


def parse_hypnogram(data: bytes, label_map: dict | None = None) -> list[StageAnnotation]:
    """Sleep-stage annotations from an EDF+ hypnogram file."""
    _, _, events = _parse_edf(bytes(data))
    return stage_annotations(events, label_map)


def _tal_bytes(annotations: Sequence[EdfAnnotation], record_onset: float) -> bytes:
    out = bytearray(f"+{record_onset:g}\x14\x14\x00".encode())
    for ev in annotations:
        out += f"+{ev.onset_s:g}\x15{ev.duration_s:g}\x14{ev.text}\x14\x00".encode()
    return bytes(out)


def _fmt(value, width: int) -> bytes:
    text = str(value)
    if isinstance(value, float):
        precision = width
        text = f"{value:.{precision}g}"
        while len(text) > width and precision > 1:
            precision -= 1
            text = f"{value:.{precision}g}"
    raw = text.encode("latin-1")
    if len(raw) > width:
        raise ValueError(f"value {value!r} does not fit in {width} bytes")
    return raw.ljust(width, b" ")


def _header_bound(value: float, outward: float) -> float:
    """``value`` as it will read back from an 8-byte header field, nudged outward if rounding moved it inward."""
    shown = float(_fmt(float(value), 8))
    step = 10.0 ** (np.floor(np.log10(abs(value))) - 5) if value else 1e-6
    while (shown - value) * outward < 0:
        shown = float(_fmt(shown + outward * step, 8))
        step *= 2
    return shown


def write_edf(
    channels: Sequence[ChannelSeries],
    record_duration_s: float = 1.0,
    start_time: dt.datetime | None = None,
    patient: str = "X",
    annotations: Sequence[EdfAnnotation] = (),
    digital_range: tuple[int, int] = (-32768, 32767),
    physical_ranges: Sequence[tuple[float, float]] | None = None,
) -> bytes:
    """Encode channels (and optional EDF+ annotations) as EDF bytes.

    Samples are quantised to 16 bits, so a parse/write round trip is exact only
    up to one digital step.
    """
    start_time = start_time or dt.datetime(2000, 1, 1, tzinfo=dt.timezone.utc)
    sigs = []
    blocks = []
    for i, ch in enumerate(channels):
        n = ch.sample_rate_hz * record_duration_s
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"channel {ch.name!r}: record duration gives fractional samples")
        n = int(round(n))
        if ch.samples.size % n:
            raise ValueError(f"channel {ch.name!r}: length is not a whole number of records")
        if physical_ranges is not None:
            lo, hi = physical_ranges[i]
        else:
            lo, hi = float(ch.samples.min()), float(ch.samples.max())
            if hi == lo:
                lo, hi = lo - 1.0, hi + 1.0
        # quantise against the bounds a reader will see, not the unrounded ones
        lo, hi = _header_bound(lo, -1.0), _header_bound(hi, 1.0)
        dlo, dhi = digital_range
        digital = np.round(dlo + (ch.samples - lo) * (dhi - dlo) / (hi - lo))
        digital = np.clip(digital, dlo, dhi).astype("<i2")
        sigs.append(dict(label=ch.name, dim=ch.unit, pmin=lo, pmax=hi, dmin=dlo, dmax=dhi, n=n))
        blocks.append(digital.reshape(-1, n))
    n_records = blocks[0].shape[0] if blocks else 1
    if any(b.shape[0] != n_records for b in blocks):
        raise ValueError("channels cover different numbers of records")
    if annotations or not blocks:
        per_record = [[] for _ in range(n_records)]
        for ev in annotations:
            idx = min(int(ev.onset_s // record_duration_s), n_records - 1) if record_duration_s > 0 else 0
            per_record[idx].append(ev)
        tals = [_tal_bytes(evs, r * record_duration_s) for r, evs in enumerate(per_record)]
        width = max(len(t) for t in tals)
        width += width % 2
        n = width // 2
        ann = np.zeros((n_records, width), dtype=np.uint8)
        for r, t in enumerate(tals):
            ann[r, : len(t)] = np.frombuffer(t, dtype=np.uint8)
        sigs.append(dict(label=ANNOTATION_LABEL, dim="", pmin=-1.0, pmax=1.0, dmin=-32768, dmax=32767, n=n))
        blocks.append(ann.view("<i2"))

    ns = len(sigs)
    head = bytearray()
    head += _fmt("0", 8)
    head += _fmt(patient, 80)
    head += _fmt("Startdate X X X X" if annotations else "X", 80)
    head += start_time.strftime("%d.%m.%y").encode()
    head += start_time.strftime("%H.%M.%S").encode()
    head += _fmt(256 * (ns + 1), 8)
    head += _fmt("EDF+C" if annotations or not channels else "", 44)
    head += _fmt(n_records, 8)
    head += _fmt(float(record_duration_s) if record_duration_s % 1 else int(record_duration_s), 8)
    head += _fmt(ns, 4)
    for key, width in (("label", 16),):
        for s in sigs:
            head += _fmt(s[key], width)
    for s in sigs:
        head += _fmt("", 80)
    for s in sigs:
        head += _fmt(s["dim"], 8)
    for key in ("pmin", "pmax"):
        for s in sigs:
            head += _fmt(float(s[key]), 8)
    for key in ("dmin", "dmax"):
        for s in sigs:
            head += _fmt(int(s[key]), 8)
    for s in sigs:
        head += _fmt("", 80)
    for s in sigs:
        head += _fmt(int(s["n"]), 8)
    for s in sigs:
        head += _fmt("", 32)
    body = np.concatenate([b.astype("<i2") for b in blocks], axis=1).tobytes()
    return bytes(head) + body


# ---------------------------------------------------------------------------
# CSV exports


@dataclass
class ColumnSchema:
    """How to read a signal CSV: sample rate plus which columns are what."""

    sample_rate_hz: float
    channels: list | None = None
    label_column: str | None = None
    label_kind: str = "attention"
    subject_id: str | None = None
    unit: str = "uV"
    start_time: str | None = None

    @classmethod
    def from_file(cls, path) -> "ColumnSchema":
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        if "sample_rate_hz" not in raw:
            raise MissingColumn("schema must declare sample_rate_hz")
        return cls(**raw)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(
                {k: v for k, v in self.__dict__.items() if v is not None}, fh, sort_keys=True
            )


def _label_parser(kind: str):
    if kind == "attention":
        return AttentionState.parse
    if kind == "sleep_stage":
        return SleepStage.parse
    if kind == "raw":
        return str
    raise DataError(f"unknown label kind {kind!r}")


def _runs_to_spans(labels: Sequence, rate: float) -> list[LabelSpan]:
    spans = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            spans.append(LabelSpan(start / rate, (i - start) / rate, labels[start]))
            start = i
    return spans


def load_signal_csv(path, schema: ColumnSchema) -> Recording:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    frame.columns = [c.strip() for c in frame.columns]
    wanted = list(schema.channels) if schema.channels else [
        c for c in frame.columns if c != schema.label_column
    ]
    missing = [c for c in wanted if c not in frame.columns]
    if schema.label_column and schema.label_column not in frame.columns:
        missing.append(schema.label_column)
    if missing:
        raise MissingColumn(f"{path}: missing columns {missing}")
    if frame.empty:
        raise DataError(f"{path}: no data rows")

    channels = []
    for name in wanted:
        text = frame[name].str.strip()
        values = pd.to_numeric(text, errors="coerce")
        bad = values.isna().to_numpy() & (text.str.lower() != "nan").to_numpy()
        if bad.any():
            row = int(np.argmax(bad))
            raise NonNumericCell(row + 1, name, frame[name].iloc[row])
        channels.append(
            ChannelSeries(
                name=name,
                sample_rate_hz=float(schema.sample_rate_hz),
                samples=_exact_floats(text),
                unit=schema.unit,
            )
        )

    spans = []
    if schema.label_column:
        parse = _label_parser(schema.label_kind)
        cache = {}
        labels = []
        for value in frame[schema.label_column]:
            if value not in cache:
                cache[value] = parse(value)
            labels.append(cache[value])
        spans = _runs_to_spans(labels, float(schema.sample_rate_hz))

    start = (
        dt.datetime.fromisoformat(schema.start_time)
        if schema.start_time
        else dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc)
    )
    if start.tzinfo is None:
        start = start.replace(tzinfo=dt.timezone.utc)
    subject = schema.subject_id or os.path.splitext(os.path.basename(str(path)))[0]
    return Recording(
        channels=tuple(channels),
        start_time=start,
        subject_id=subject,
        source="CSV",
        annotations=tuple(spans),
        header={"path": str(path)},
    )


def _exact_floats(text: pd.Series) -> np.ndarray:
    # string -> float64 here is correctly rounded, so repr() output round-trips bit for bit
    return text.to_numpy(dtype=object).astype(np.float64)


def write_signal_csv(recording: Recording, path, label_column: str | None = None) -> ColumnSchema:
    """Write a single-rate recording in the signal CSV layout and return its schema."""
    rates = {c.sample_rate_hz for c in recording.channels}
    if len(rates) != 1:
        raise DataError("signal CSV needs one sample rate shared by every channel")
    n = min(c.samples.size for c in recording.channels)
    rate = rates.pop()
    labels = None
    if label_column:
        labels = [""] * n
        for span in recording.annotations:
            lo = int(round(span.onset_s * rate))
            hi = min(n, int(round(span.end_s * rate)))
            text = getattr(span.label, "text", str(span.label))
            labels[lo:hi] = [text] * (hi - lo)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(recording.channel_names + ([label_column] if label_column else []))
        cols = [c.samples[:n] for c in recording.channels]
        for i in range(n):
            row = [repr(float(col[i])) for col in cols]
            if labels is not None:
                row.append(labels[i])
            writer.writerow(row)
    kind = "raw"
    if recording.annotations:
        first = recording.annotations[0].label
        kind = "attention" if isinstance(first, AttentionState) else "sleep_stage" if isinstance(first, SleepStage) else "raw"
    return ColumnSchema(
        sample_rate_hz=rate,
        channels=recording.channel_names,
        label_column=label_column,
        label_kind=kind,
        subject_id=recording.subject_id,
        unit=recording.channels[0].unit,
        start_time=recording.start_time.isoformat(),
    )


def attention_mat_to_frame(path, channel_names: Sequence[str] | None = None, sample_rate_hz: float = 128.0,
                           focused_min: float = 10.0, unfocused_min: float = 20.0) -> pd.DataFrame:
    """Convert one Kaggle mental-attention ``eeg_record*.mat`` file to the signal CSV layout.

    Columns 4-17 of ``o.data`` hold the 14 Emotiv EEG channels; states follow
    the protocol timing (focused, then unfocused, then drowsy).
    """
    from scipy.io import loadmat

    names = list(channel_names or EMOTIV_CHANNELS)
    mat = loadmat(path, squeeze_me=True, struct_as_record=False)
    data = np.asarray(mat["o"].data, dtype=np.float64)[:, 3:17]
    frame = pd.DataFrame(data, columns=names)
    minutes = np.arange(len(frame)) / sample_rate_hz / 60.0
    frame["state"] = np.where(
        minutes < focused_min, "focused", np.where(minutes < unfocused_min, "unfocused", "drowsy")
    )
    return frame


def load_attention_mat(path, sample_rate_hz: float = 128.0, subject_id: str | None = None) -> Recording:
    """Read a Kaggle attention ``.mat`` recording with its state labels as annotations."""
    frame = attention_mat_to_frame(path, sample_rate_hz=sample_rate_hz)
    channels = [
        ChannelSeries(name, sample_rate_hz, frame[name].to_numpy(dtype=np.float64)) for name in EMOTIV_CHANNELS
    ]
    labels = [AttentionState.parse(s) for s in frame["state"]]
    return Recording(
        channels=tuple(channels),
        start_time=dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc),
        subject_id=subject_id or os.path.splitext(os.path.basename(str(path)))[0],
        source="CSV",
        annotations=tuple(_runs_to_spans(labels, sample_rate_hz)),
        header={"path": str(path)},
    )


EMOTIV_CHANNELS = ("AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8", "AF4")


# ---------------------------------------------------------------------------
# Activity


class ActivityCode(enum.IntEnum):
    STATIONARY = 0
    WALKING = 1
    RUNNING = 2
    UNKNOWN = 3


@dataclass(frozen=True)
class ActivitySeries:
    subject_id: str
    timestamps: np.ndarray  # unix seconds
    codes: np.ndarray
    tz: str = "UTC"

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=np.int64)
        codes = np.array(self.codes, dtype=np.int64)
        if ts.shape != codes.shape or ts.ndim != 1:
            raise DataError("timestamps and codes must be equal-length 1-D sequences")
        if ts.size and np.any(np.diff(ts) <= 0):
            raise NonMonotonicTimestamps("activity timestamps must be strictly increasing")
        bad = ~np.isin(codes, (0, 1, 2, 3))
        if bad.any():
            raise InvalidActivityCode(f"activity code {int(codes[bad][0])} not in 0-3")
        ts.setflags(write=False)
        codes.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "codes", codes)

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(zip(self.timestamps.tolist(), self.codes.tolist()))

    def __len__(self):
        return int(self.timestamps.size)

    @classmethod
    def from_entries(cls, subject_id: str, entries: Iterable[tuple[int, int]], tz: str = "UTC") -> "ActivitySeries":
        entries = sorted(entries)
        ts = [int(t) for t, _ in entries]
        codes = [int(c) for _, c in entries]
        return cls(subject_id, np.array(ts, dtype=np.int64), np.array(codes, dtype=np.int64), tz)


_ACTIVITY_ALIASES = ("activity", "activity inference", "activity_inference", "activity_code")


def load_activity_csv(path, tz: str = "UTC", subject_id: str | None = None) -> ActivitySeries:
    """Load ``timestamp,activity`` rows; rows are sorted, duplicated timestamps rejected."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    frame.columns = [c.strip().lower() for c in frame.columns]
    if "timestamp" not in frame.columns:
        raise MissingColumn(f"{path}: missing column 'timestamp'")
    code_col = next((c for c in _ACTIVITY_ALIASES if c in frame.columns), None)
    if code_col is None:
        raise MissingColumn(f"{path}: missing column 'activity'")
    entries = []
    for row, (t, c) in enumerate(zip(frame["timestamp"], frame[code_col]), start=1):
        try:
            ts = float(t)
        except ValueError:
            raise NonNumericCell(row, "timestamp", t) from None
        try:
            code = float(c)
        except ValueError:
            raise NonNumericCell(row, code_col, c) from None
        if not code.is_integer() or int(code) not in (0, 1, 2, 3):
            raise InvalidActivityCode(f"row {row}: activity code {c!r} not in 0-3")
        entries.append((int(ts), int(code)))
    entries.sort()
    subject = subject_id or os.path.splitext(os.path.basename(str(path)))[0]
    return ActivitySeries.from_entries(subject, entries, tz)


# ---------------------------------------------------------------------------
# Epochs and splits


@dataclass(frozen=True)
class Epoch:
    signal: dict
    sample_rates: dict
    length_s: float
    label: object
    subject_id: str
    index: int
    recording_id: str = ""
    excluded: bool = False

    @property
    def channel_names(self) -> list[str]:
        return list(self.signal)

    @property
    def key(self) -> tuple:
        return (self.subject_id, self.recording_id, self.index)


def _window(length_s: float, rate: float) -> int:
    n = length_s * rate
    w = int(round(n))
    if abs(n - w) > 1e-9 or w < 1:
        raise DataError(f"{length_s} s at {rate} Hz is not a whole number of samples")
    return w


def segment_epochs(
    recording: Recording,
    length_s: float,
    annotations: Sequence | None = None,
    channels: Sequence[str] | None = None,
    recording_id: str | None = None,
    on_uncovered: str = "raise",
) -> list[Epoch]:
    """Cut a recording into consecutive non-overlapping windows.

    Each window takes the label of the annotation covering its midpoint and
    is flagged ``excluded`` when that label is the unknown/movement stage.
    The trailing partial window is dropped. ``on_uncovered`` is ``"raise"``
    or ``"drop"`` for windows whose midpoint no annotation covers.
    """
    if not length_s > 0:
        raise DataError("epoch length must be positive")
    if on_uncovered not in ("raise", "drop"):
        raise ValueError("on_uncovered must be 'raise' or 'drop'")
    chans = [recording.channel(n) for n in channels] if channels else list(recording.channels)
    if not chans:
        raise DataError("recording has no channels to segment")
    windows = {c.name: _window(length_s, c.sample_rate_hz) for c in chans}
    n_epochs = min(c.samples.size // windows[c.name] for c in chans)

    spans = sorted(annotations or (), key=lambda a: a.onset_s)
    onsets = [a.onset_s for a in spans]
    rid = recording_id if recording_id is not None else recording.header.get("path", "")

    epochs = []
    for i in range(n_epochs):
        label = None
        excluded = False
        if annotations is not None:
            mid = (i + 0.5) * length_s
            j = bisect.bisect_right(onsets, mid) - 1
            if j < 0 or not (spans[j].onset_s <= mid < spans[j].end_s):
                if on_uncovered == "drop":
                    continue
                raise NoAnnotationCoverage(f"epoch {i} midpoint {mid}s is not annotated")
            label = spans[j].label
            excluded = isinstance(label, SleepStage) and label == SleepStage.UNKNOWN_OR_MOVEMENT
        signal = {}
        for c in chans:
            w = windows[c.name]
            signal[c.name] = c.samples[i * w : (i + 1) * w]
        epochs.append(
            Epoch(
                signal=signal,
                sample_rates={c.name: c.sample_rate_hz for c in chans},
                length_s=float(length_s),
                label=label,
                subject_id=recording.subject_id,
                index=i,
                recording_id=str(rid),
                excluded=excluded,
            )
        )
    return epochs


@dataclass(frozen=True)
class SplitSpec:
    train: int
    validation: int
    test: int
    seed: int = 0

    @property
    def total(self) -> int:
        return self.train + self.validation + self.test


@dataclass(frozen=True)
class SplitSet:
    train: list
    validation: list
    test: list
    seed: int


def make_splits(epochs: Sequence[Epoch], spec: SplitSpec) -> SplitSet:
    """Seeded uniform sampling without replacement into test, validation and train.

    Excluded epochs never enter a split. Membership depends only on the set of
    epoch keys, the counts and the seed, not on input order.
    """
    if min(spec.train, spec.validation, spec.test) < 0:
        raise DataError("split sizes must be non-negative")
    pool = sorted((e for e in epochs if not e.excluded), key=lambda e: e.key)
    keys = [e.key for e in pool]
    if len(set(keys)) != len(keys):
        raise DataError("epoch keys (subject, recording, index) are not unique")
    if spec.total > len(pool):
        raise InsufficientEpochs(f"split needs {spec.total} epochs, only {len(pool)} available")
    order = np.random.default_rng(spec.seed).permutation(len(pool))
    test_idx = np.sort(order[: spec.test])
    val_idx = np.sort(order[spec.test : spec.test + spec.validation])
    train_idx = np.sort(order[spec.test + spec.validation : spec.total])
    return SplitSet(
        train=[pool[i] for i in train_idx],
        validation=[pool[i] for i in val_idx],
        test=[pool[i] for i in test_idx],
        seed=spec.seed,
    )

