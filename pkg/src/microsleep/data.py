"""Core record/epoch containers and the on-disk epoch-set format.

Everything downstream (spectrograms, embeddings, models, evaluation) consumes
30-second epochs sampled at 100 Hz, i.e. 3000 samples per epoch. Epochs carry
either night-sleep stage labels or driving wake/micro-sleep labels, never a
mix of the two within one set.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPOCH_SECONDS = 30
TARGET_FS = 100.0
EPOCH_SAMPLES = int(EPOCH_SECONDS * TARGET_FS)

SLEEP_STAGES = ("Wake", "N1", "N2", "N3", "N4")
MICRO_LABELS = ("Wake", "MicroSleep")

ALPHABETS: dict[str, tuple[str, ...]] = {
    "SleepStages5": SLEEP_STAGES,
    "MicroSleep2": MICRO_LABELS,
}

EPOCHSET_FORMAT_VERSION = 1


class DataError(Exception):
    """Base class for container validation failures."""


@dataclass(frozen=True)
class Annotation:
    """One onset/duration/text event, e.g. a hypnogram interval."""

    onset_s: float
    duration_s: float
    text: str

    def __post_init__(self) -> None:
        if self.onset_s < 0:
            raise DataError(f"annotation onset must be >= 0, got {self.onset_s}")
        if self.duration_s < 0:
            raise DataError(f"annotation duration must be >= 0, got {self.duration_s}")


@dataclass
class EegRecord:
    """One subject's continuous single-channel EEG trace."""

    subject_id: str
    channel: str
    fs: float
    samples: np.ndarray
    source: str = ""

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise DataError(f"sampling rate must be positive, got {self.fs}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("samples contain non-finite values")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs


@dataclass
class Epoch:
    """A 30-second labeled window of one subject's EEG."""

    subject_id: str
    index: int
    samples: np.ndarray
    label: str

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.shape != (EPOCH_SAMPLES,):
            raise DataError(
                f"epoch must hold exactly {EPOCH_SAMPLES} samples, got shape {self.samples.shape}"
            )


@dataclass
class EpochSet:
    """Ordered epochs grouped by subject, under a single label alphabet."""

    epochs: list[Epoch]
    alphabet: str
    _spans: dict[str, tuple[int, int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.alphabet not in ALPHABETS:
            raise DataError(f"unknown label alphabet {self.alphabet!r}")
        allowed = set(ALPHABETS[self.alphabet])
        spans: dict[str, tuple[int, int]] = {}
        for i, ep in enumerate(self.epochs):
            if ep.label not in allowed:
                raise DataError(
                    f"epoch {i} label {ep.label!r} not in alphabet {self.alphabet}"
                )
            if ep.subject_id in spans:
                start, end = spans[ep.subject_id]
                if end != i:
                    raise DataError(
                        f"epochs of subject {ep.subject_id!r} are not contiguous"
                    )
                if ep.index <= self.epochs[i - 1].index:
                    raise DataError(
                        f"subject {ep.subject_id!r} epochs not index-ordered at position {i}"
                    )
                spans[ep.subject_id] = (start, i + 1)
            else:
                spans[ep.subject_id] = (i, i + 1)
        self._spans = spans

    def __len__(self) -> int:
        return len(self.epochs)

    def __iter__(self):
        return iter(self.epochs)

    @property
    def subjects(self) -> list[str]:
        return list(self._spans)

    @property
    def labels(self) -> list[str]:
        return [ep.label for ep in self.epochs]

    def subject_epochs(self, subject_id: str) -> list[Epoch]:
        start, end = self._spans[subject_id]
        return self.epochs[start:end]

    def label_counts(self) -> dict[str, int]:
        counts = {label: 0 for label in ALPHABETS[self.alphabet]}
        for ep in self.epochs:
            counts[ep.label] += 1
        return counts

    def sample_matrix(self) -> np.ndarray:
        """All epochs stacked as an (n, 3000) float32 matrix, in set order."""
        if not self.epochs:
            return np.zeros((0, EPOCH_SAMPLES), dtype=np.float32)
        return np.stack([ep.samples for ep in self.epochs])

    def subset(self, subject_ids: Iterable[str]) -> "EpochSet":
        wanted = set(subject_ids)
        kept = [ep for ep in self.epochs if ep.subject_id in wanted]
        return EpochSet(kept, self.alphabet)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write a file via temp-then-rename so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_epoch_set(epoch_set: EpochSet, stem: str | os.PathLike) -> tuple[Path, Path]:
    """Persist an EpochSet as ``<stem>.json`` + ``<stem>.bin``.

    The manifest lists the alphabet, epoch count, and per-subject epoch
    indices. The blob holds every epoch's 3000 little-endian float32 samples
    in set order, followed by one label-code byte per epoch (the label's
    position in the alphabet).
    """
    stem = Path(stem)
    subjects = []
    for sid in epoch_set.subjects:
        subjects.append(
            {
                "subject_id": sid,
                "epoch_indices": [ep.index for ep in epoch_set.subject_epochs(sid)],
            }
        )
    manifest = {
        "format_version": EPOCHSET_FORMAT_VERSION,
        "alphabet": epoch_set.alphabet,
        "epoch_count": len(epoch_set),
        "subjects": subjects,
    }
    labels = ALPHABETS[epoch_set.alphabet]
    samples = epoch_set.sample_matrix().astype("<f4")
    codes = bytes(labels.index(ep.label) for ep in epoch_set)
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    atomic_write_text(json_path, json.dumps(manifest, indent=2) + "\n")
    atomic_write_bytes(bin_path, samples.tobytes() + codes)
    return json_path, bin_path


def load_epoch_set(stem: str | os.PathLike) -> EpochSet:
    """Load an EpochSet written by :func:`save_epoch_set`."""
    stem = Path(stem)
    json_path = stem if stem.suffix == ".json" else stem.with_suffix(".json")
    bin_path = json_path.with_suffix(".bin")
    manifest = json.loads(json_path.read_text())
    if manifest.get("format_version") != EPOCHSET_FORMAT_VERSION:
        raise DataError(
            f"unsupported epoch-set format version {manifest.get('format_version')!r}"
        )
    alphabet = manifest["alphabet"]
    labels = ALPHABETS[alphabet]
    n = manifest["epoch_count"]
    blob = bin_path.read_bytes()
    expected = n * EPOCH_SAMPLES * 4 + n
    if len(blob) != expected:
        raise DataError(
            f"epoch-set blob has {len(blob)} bytes, expected {expected} for {n} epochs"
        )
    samples = np.frombuffer(blob[: n * EPOCH_SAMPLES * 4], dtype="<f4").reshape(
        n, EPOCH_SAMPLES
    )
    codes = blob[n * EPOCH_SAMPLES * 4 :]
    epochs: list[Epoch] = []
    pos = 0
    for entry in manifest["subjects"]:
        for index in entry["epoch_indices"]:
            epochs.append(
                Epoch(
                    subject_id=entry["subject_id"],
                    index=index,
                    samples=samples[pos].copy(),
                    label=labels[codes[pos]],
                )
            )
            pos += 1
    if pos != n:
        raise DataError(f"manifest lists {pos} epochs but epoch_count is {n}")
    return EpochSet(epochs, alphabet)


def concat_epoch_sets(sets: Sequence[EpochSet]) -> EpochSet:
    if not sets:
        raise DataError("cannot concatenate an empty list of epoch sets")
    alphabet = sets[0].alphabet
    if any(s.alphabet != alphabet for s in sets):
        raise DataError("cannot concatenate epoch sets with different alphabets")
    epochs: list[Epoch] = []
    for s in sets:
        epochs.extend(s.epochs)
    return EpochSet(epochs, alphabet)
