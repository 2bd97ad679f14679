"""EDF/EDF+ ingestion: header and signal parsing, annotations, epoch labeling.

Covers the EDF 1.0 container (fixed-width ASCII header, 16-bit little-endian
two's-complement samples), EDF+ time-stamped annotation lists (TALs), CSV
label sidecars, cutting records into labeled 30-s epochs, and the KSS rule
that marks the five minutes before a sleepy self-report as micro-sleep.

A minimal EDF writer is included for building test fixtures and synthetic
recordings; it is not a general-purpose exporter.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    EPOCH_SAMPLES,
    EPOCH_SECONDS,
    TARGET_FS,
    Annotation,
    EegRecord,
    Epoch,
    EpochSet,
    atomic_write_bytes,
)


class EdfError(Exception):
    """Base class for EDF parsing and labeling failures."""


class TruncatedHeader(EdfError):
    pass


class MalformedField(EdfError):
    pass


class InconsistentHeader(EdfError):
    pass


class TruncatedData(EdfError):
    pass


class IndexOutOfRange(EdfError):
    pass


class DegenerateScaling(EdfError):
    pass


class MalformedTal(EdfError):
    pass


class UnsupportedSamplingRate(EdfError):
    pass


class NoLabelsOverlap(EdfError):
    pass


class ScoreOutOfRange(EdfError):
    pass


ANNOTATION_LABEL = "EDF Annotations"

STAGE_TEXT = {
    "Sleep stage W": "Wake",
    "Sleep stage 1": "N1",
    "Sleep stage 2": "N2",
    "Sleep stage 3": "N3",
    "Sleep stage 4": "N4",
}

KSS_SLEEPY_THRESHOLD = 7
KSS_BLOCK_SECONDS = 300.0


@dataclass(frozen=True)
class EdfSignalHeader:
    label: str
    transducer: str
    physical_dim: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    prefiltering: str
    samples_per_record: int


@dataclass(frozen=True)
class EdfHeader:
    version: str
    subject_id: str
    recording_id: str
    start_datetime: dt.datetime
    header_bytes: int
    num_records: int
    record_duration_s: float
    num_signals: int
    signals: tuple[EdfSignalHeader, ...]

    def fs(self, signal_index: int) -> float:
        return self.signals[signal_index].samples_per_record / self.record_duration_s


def _ascii(data: bytes, offset: int, width: int) -> str:
    return data[offset : offset + width].decode("ascii", errors="replace").strip()


def _int_field(data: bytes, offset: int, width: int, name: str) -> int:
    raw = _ascii(data, offset, width)
    try:
        return int(raw)
    except ValueError:
        raise MalformedField(f"field {name!r} is not an integer: {raw!r}") from None


def _float_field(data: bytes, offset: int, width: int, name: str) -> float:
    raw = _ascii(data, offset, width)
    try:
        return float(raw)
    except ValueError:
        raise MalformedField(f"field {name!r} is not numeric: {raw!r}") from None


def _parse_start(date_str: str, time_str: str) -> dt.datetime:
    try:
        day, month, year = (int(p) for p in date_str.split("."))
        hour, minute, second = (int(p) for p in time_str.split("."))
    except ValueError:
        raise MalformedField(
            f"malformed start date/time: {date_str!r} {time_str!r}"
        ) from None
    # EDF two-digit year convention: 85-99 -> 1985-1999, 00-84 -> 2000-2084.
    year += 1900 if year >= 85 else 2000
    try:
        return dt.datetime(year, month, day, hour, minute, second)
    except ValueError:
        raise MalformedField(
            f"invalid calendar start: {date_str!r} {time_str!r}"
        ) from None


def parse_edf_header(data: bytes) -> EdfHeader:
    """Parse the fixed 256-byte header plus the 256-byte-per-signal block."""
    if len(data) < 256:
        raise TruncatedHeader(f"need at least 256 header bytes, got {len(data)}")
    version = _ascii(data, 0, 8)
    subject_id = _ascii(data, 8, 80)
    recording_id = _ascii(data, 88, 80)
    start = _parse_start(_ascii(data, 168, 8), _ascii(data, 176, 8))
    header_bytes = _int_field(data, 184, 8, "header_bytes")
    num_records = _int_field(data, 236, 8, "num_records")
    record_duration = _float_field(data, 244, 8, "record_duration_s")
    num_signals = _int_field(data, 252, 4, "num_signals")

    if num_signals < 0:
        raise MalformedField(f"negative signal count {num_signals}")
    if num_records < 0:
        raise MalformedField(f"negative record count {num_records}")
    if record_duration <= 0:
        raise MalformedField(f"record duration must be positive, got {record_duration}")
    expected_header = 256 + 256 * num_signals
    if header_bytes != expected_header:
        raise InconsistentHeader(
            f"header_bytes field is {header_bytes} but {num_signals} signals "
            f"require {expected_header}"
        )
    if len(data) < expected_header:
        raise TruncatedHeader(
            f"header declares {expected_header} bytes, file has {len(data)}"
        )

    def column(base: int, width: int) -> list[str]:
        return [
            _ascii(data, 256 + base * num_signals + i * width, width)
            for i in range(num_signals)
        ]

    labels = column(0, 16)
    transducers = column(16, 80)
    dims = column(96, 8)
    pmins = [
        _float_field(data, 256 + 104 * num_signals + i * 8, 8, f"physical_min[{i}]")
        for i in range(num_signals)
    ]
    pmaxs = [
        _float_field(data, 256 + 112 * num_signals + i * 8, 8, f"physical_max[{i}]")
        for i in range(num_signals)
    ]
    dmins = [
        _int_field(data, 256 + 120 * num_signals + i * 8, 8, f"digital_min[{i}]")
        for i in range(num_signals)
    ]
    dmaxs = [
        _int_field(data, 256 + 128 * num_signals + i * 8, 8, f"digital_max[{i}]")
        for i in range(num_signals)
    ]
    prefilters = column(136, 80)
    sprs = [
        _int_field(data, 256 + 216 * num_signals + i * 8, 8, f"samples_per_record[{i}]")
        for i in range(num_signals)
    ]
    for i, spr in enumerate(sprs):
        if spr <= 0:
            raise MalformedField(f"samples_per_record[{i}] must be positive, got {spr}")

    signals = tuple(
        EdfSignalHeader(
            label=labels[i],
            transducer=transducers[i],
            physical_dim=dims[i],
            physical_min=pmins[i],
            physical_max=pmaxs[i],
            digital_min=dmins[i],
            digital_max=dmaxs[i],
            prefiltering=prefilters[i],
            samples_per_record=sprs[i],
        )
        for i in range(num_signals)
    )
    return EdfHeader(
        version=version,
        subject_id=subject_id,
        recording_id=recording_id,
        start_datetime=start,
        header_bytes=header_bytes,
        num_records=num_records,
        record_duration_s=record_duration,
        num_signals=num_signals,
        signals=signals,
    )


def _record_matrix(data: bytes, header: EdfHeader) -> np.ndarray:
    """Raw int16 sample matrix of shape (num_records, sum of samples_per_record)."""
    total_spr = sum(s.samples_per_record for s in header.signals)
    expected = header.num_records * total_spr * 2
    region = data[header.header_bytes :]
    if len(region) < expected:
        raise TruncatedData(
            f"data region has {len(region)} bytes, header requires {expected}"
        )
    raw = np.frombuffer(region[:expected], dtype="<i2")
    return raw.reshape(header.num_records, total_spr)


def read_signal(
    data: bytes,
    header: EdfHeader,
    signal_index: int,
    subject_id: str | None = None,
    source: str = "",
) -> EegRecord:
    """Decode one signal to physical units via the EDF affine scaling."""
    if not 0 <= signal_index < header.num_signals:
        raise IndexOutOfRange(
            f"signal index {signal_index} out of range for {header.num_signals} signals"
        )
    sig = header.signals[signal_index]
    if sig.digital_min >= sig.digital_max:
        raise DegenerateScaling(
            f"signal {signal_index}: digital range [{sig.digital_min}, {sig.digital_max}]"
        )
    if sig.physical_min == sig.physical_max:
        raise DegenerateScaling(
            f"signal {signal_index}: physical_min equals physical_max ({sig.physical_min})"
        )
    matrix = _record_matrix(data, header)
    offset = sum(s.samples_per_record for s in header.signals[:signal_index])
    digital = matrix[:, offset : offset + sig.samples_per_record].reshape(-1)
    scale = (sig.physical_max - sig.physical_min) / (sig.digital_max - sig.digital_min)
    physical = sig.physical_min + (digital.astype(np.float64) - sig.digital_min) * scale
    return EegRecord(
        subject_id=subject_id if subject_id is not None else header.subject_id,
        channel=sig.label,
        fs=header.fs(signal_index),
        samples=physical,
        source=source or f"#{signal_index}",
    )


def annotation_bytes(data: bytes, header: EdfHeader) -> bytes:
    """Concatenated raw bytes of the 'EDF Annotations' signal across records."""
    indices = [i for i, s in enumerate(header.signals) if s.label == ANNOTATION_LABEL]
    if not indices:
        raise IndexOutOfRange("file has no 'EDF Annotations' signal")
    idx = indices[0]
    matrix = _record_matrix(data, header)
    offset = sum(s.samples_per_record for s in header.signals[:idx])
    spr = header.signals[idx].samples_per_record
    chunks = matrix[:, offset : offset + spr].astype("<i2").tobytes()
    return chunks


def parse_tal_annotations(data: bytes) -> list[Annotation]:
    """Decode a TAL byte stream into annotations, skipping keep-alive TALs."""
    annotations: list[Annotation] = []
    for chunk in data.split(b"\x00"):
        if not chunk:
            continue
        fields = chunk.split(b"\x14")
        if len(fields) < 2 or fields[-1] != b"":
            raise MalformedTal(f"TAL missing 0x14 terminator: {chunk!r}")
        stamp = fields[0]
        if not stamp or stamp[0] not in b"+-":
            raise MalformedTal(f"TAL onset must start with '+' or '-': {chunk!r}")
        parts = stamp.split(b"\x15")
        if len(parts) > 2:
            raise MalformedTal(f"TAL has multiple duration separators: {chunk!r}")
        try:
            onset = float(parts[0])
            duration = float(parts[1]) if len(parts) == 2 else 0.0
        except ValueError:
            raise MalformedTal(f"non-numeric TAL timestamp: {chunk!r}") from None
        for text in fields[1:-1]:
            if text:
                annotations.append(
                    Annotation(
                        onset_s=onset, duration_s=duration, text=text.decode("utf-8")
                    )
                )
    return annotations


def _require_target_fs(rec: EegRecord) -> None:
    if abs(rec.fs - TARGET_FS) > 1e-9:
        raise UnsupportedSamplingRate(
            f"epoching requires fs = {TARGET_FS:g} Hz, got {rec.fs:g} "
            "(resampling is out of scope)"
        )


def epoch_sleep_record(rec: EegRecord, hypnogram: Sequence[Annotation]) -> EpochSet:
    """Cut a night recording into 30-s epochs labeled from the hypnogram.

    Each epoch takes the label of the hypnogram interval covering its start;
    epochs scored REM, Movement, or anything outside the five-stage alphabet
    are dropped while their neighbors keep original indices. A trailing
    partial window is discarded.
    """
    _require_target_fs(rec)
    n_epochs = rec.samples.size // EPOCH_SAMPLES
    epochs: list[Epoch] = []
    any_overlap = False
    for i in range(n_epochs):
        start_s = i * EPOCH_SECONDS
        label_text = None
        for ann in hypnogram:
            if ann.onset_s <= start_s < ann.onset_s + ann.duration_s:
                label_text = ann.text
                any_overlap = True
        if label_text is None:
            continue
        stage = STAGE_TEXT.get(label_text)
        if stage is None:
            continue
        epochs.append(
            Epoch(
                subject_id=rec.subject_id,
                index=i,
                samples=rec.samples[i * EPOCH_SAMPLES : (i + 1) * EPOCH_SAMPLES],
                label=stage,
            )
        )
    if not any_overlap:
        raise NoLabelsOverlap(
            f"hypnogram covers no epoch of subject {rec.subject_id!r}"
        )
    return EpochSet(epochs, "SleepStages5")


def label_driving_epochs(
    rec: EegRecord,
    kss_reports: Sequence[tuple[float, int]],
    threshold: int = KSS_SLEEPY_THRESHOLD,
) -> EpochSet:
    """Cut a driving recording into 30-s epochs labeled by the KSS rule.

    Every epoch whose start lies within the 300 s preceding a report with
    score >= ``threshold`` is MicroSleep; all others are Wake. An epoch
    straddling a block boundary takes the label of the block containing its
    start.
    """
    _require_target_fs(rec)
    previous = None
    for time_s, score in kss_reports:
        if not 1 <= score <= 9:
            raise ScoreOutOfRange(f"KSS score {score} outside 1..9 at t={time_s}")
        if previous is not None and time_s < previous:
            raise ValueError("KSS report times must be non-decreasing")
        previous = time_s
    sleepy_blocks = [
        (time_s - KSS_BLOCK_SECONDS, time_s)
        for time_s, score in kss_reports
        if score >= threshold
    ]
    n_epochs = rec.samples.size // EPOCH_SAMPLES
    epochs: list[Epoch] = []
    for i in range(n_epochs):
        start_s = i * EPOCH_SECONDS
        sleepy = any(lo <= start_s < hi for lo, hi in sleepy_blocks)
        epochs.append(
            Epoch(
                subject_id=rec.subject_id,
                index=i,
                samples=rec.samples[i * EPOCH_SAMPLES : (i + 1) * EPOCH_SAMPLES],
                label="MicroSleep" if sleepy else "Wake",
            )
        )
    return EpochSet(epochs, "MicroSleep2")


def read_hypnogram_csv(path: str | Path) -> list[Annotation]:
    """Read an `onset_s,duration_s,label` sidecar."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["onset_s", "duration_s", "label"]:
            raise MalformedField(
                f"hypnogram CSV must start with 'onset_s,duration_s,label', got {header}"
            )
        out = []
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise MalformedField(f"hypnogram row has {len(row)} fields: {row}")
            out.append(
                Annotation(onset_s=float(row[0]), duration_s=float(row[1]), text=row[2])
            )
    return out


def read_kss_csv(path: str | Path) -> list[tuple[float, int]]:
    """Read a `time_s,score` sidecar of KSS self-reports."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["time_s", "score"]:
            raise MalformedField(
                f"KSS CSV must start with 'time_s,score', got {header}"
            )
        out = []
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise MalformedField(f"KSS row has {len(row)} fields: {row}")
            out.append((float(row[0]), int(row[1])))
    return out


# --- fixture-grade writer ---------------------------------------------------


@dataclass
class EdfSignalDef:
    """Physical samples plus scaling for one signal to be written."""

    label: str
    samples: np.ndarray
    physical_min: float = -200.0
    physical_max: float = 200.0
    digital_min: int = -2048
    digital_max: int = 2047
    physical_dim: str = "uV"


def _fixed(value: str, width: int, name: str) -> bytes:
    encoded = value.encode("ascii")
    if len(encoded) > width:
        raise ValueError(f"{name} does not fit in {width} ASCII bytes: {value!r}")
    return encoded.ljust(width)


def _num(value: float | int, width: int, name: str) -> bytes:
    if isinstance(value, int):
        text = str(value)
    else:
        text = f"{value:g}"
    return _fixed(text, width, name)


def build_edf(
    signals: Sequence[EdfSignalDef],
    record_duration_s: float = float(EPOCH_SECONDS),
    subject_id: str = "X",
    recording_id: str = "X",
    start: dt.datetime | None = None,
    annotations: Sequence[Annotation] | None = None,
) -> bytes:
    """Serialize signals (and optional TAL annotations) as EDF bytes.

    Every signal length must be a multiple of its per-record sample count
    implied by `record_duration_s`; annotations are packed into a trailing
    'EDF Annotations' signal, all in the first record.
    """
    if start is None:
        start = dt.datetime(2020, 1, 1, 0, 0, 0)
    lengths = [len(s.samples) for s in signals]
    if not lengths:
        raise ValueError("need at least one signal")
    # One record per record_duration_s at the nominal 100 Hz rate when the
    # first signal divides evenly; otherwise a single record holds everything.
    base = lengths[0]
    per_record = int(TARGET_FS * record_duration_s)
    num_records = base // per_record if per_record and base % per_record == 0 else 1
    sprs = []
    for n in lengths:
        if n % num_records != 0:
            raise ValueError(
                f"signal length {n} not divisible into {num_records} records"
            )
        sprs.append(n // num_records)

    ann_payloads: list[bytes] = []
    ann_spr = 0
    if annotations is not None:
        for rec_idx in range(num_records):
            tal = f"+{rec_idx * record_duration_s:g}".encode() + b"\x14\x14\x00"
            if rec_idx == 0:
                for ann in annotations:
                    stamp = f"+{ann.onset_s:g}".encode()
                    if ann.duration_s:
                        stamp += b"\x15" + f"{ann.duration_s:g}".encode()
                    tal += stamp + b"\x14" + ann.text.encode("utf-8") + b"\x14\x00"
            ann_payloads.append(tal)
        longest = max(len(p) for p in ann_payloads)
        ann_spr = (longest + 1) // 2
        ann_payloads = [p.ljust(ann_spr * 2, b"\x00") for p in ann_payloads]

    all_labels = [s.label for s in signals]
    all_sprs = list(sprs)
    if annotations is not None:
        all_labels.append(ANNOTATION_LABEL)
        all_sprs.append(ann_spr)
    ns = len(all_labels)

    head = b"".join(
        [
            _fixed("0", 8, "version"),
            _fixed(subject_id, 80, "subject_id"),
            _fixed(recording_id, 80, "recording_id"),
            _fixed(start.strftime("%d.%m.%y"), 8, "startdate"),
            _fixed(start.strftime("%H.%M.%S"), 8, "starttime"),
            _num(256 + 256 * ns, 8, "header_bytes"),
            _fixed("", 44, "reserved"),
            _num(num_records, 8, "num_records"),
            _num(record_duration_s, 8, "record_duration"),
            _num(ns, 4, "num_signals"),
        ]
    )

    def col(values: list[str], width: int, name: str) -> bytes:
        return b"".join(_fixed(v, width, name) for v in values)

    def ncol(values: list, width: int, name: str) -> bytes:
        return b"".join(_num(v, width, name) for v in values)

    pmins = [s.physical_min for s in signals] + ([-1.0] if annotations is not None else [])
    pmaxs = [s.physical_max for s in signals] + ([1.0] if annotations is not None else [])
    dmins = [s.digital_min for s in signals] + ([-32768] if annotations is not None else [])
    dmaxs = [s.digital_max for s in signals] + ([32767] if annotations is not None else [])
    dims = [s.physical_dim for s in signals] + ([""] if annotations is not None else [])

    head += col(all_labels, 16, "label")
    head += col(["" for _ in all_labels], 80, "transducer")
    head += col(dims, 8, "physical_dim")
    head += ncol(pmins, 8, "physical_min")
    head += ncol(pmaxs, 8, "physical_max")
    head += ncol(dmins, 8, "digital_min")
    head += ncol(dmaxs, 8, "digital_max")
    head += col(["" for _ in all_labels], 80, "prefiltering")
    head += ncol(all_sprs, 8, "samples_per_record")
    head += col(["" for _ in all_labels], 32, "reserved")

    digitized = []
    for sig in signals:
        scale = (sig.physical_max - sig.physical_min) / (
            sig.digital_max - sig.digital_min
        )
        dig = np.round(
            (np.asarray(sig.samples, dtype=np.float64) - sig.physical_min) / scale
            + sig.digital_min
        )
        dig = np.clip(dig, sig.digital_min, sig.digital_max).astype("<i2")
        digitized.append(dig.reshape(num_records, -1))

    body = bytearray()
    for rec_idx in range(num_records):
        for dig in digitized:
            body += dig[rec_idx].tobytes()
        if annotations is not None:
            body += ann_payloads[rec_idx]
    return head + bytes(body)


def write_edf(path: str | Path, *args, **kwargs) -> None:
    atomic_write_bytes(path, build_edf(*args, **kwargs))


def read_edf(path: str | Path) -> tuple[EdfHeader, bytes]:
    data = Path(path).read_bytes()
    return parse_edf_header(data), data
