"""Deterministic synthetic EEG with stage-dependent spectra.

Stands in for non-public driving recordings and keeps end-to-end training
tests self-contained. Each stage is a mixture of band-limited sinusoids plus
white noise; NREM2 additionally carries spindle-like bursts. Micro-sleep
epochs are drawn from the NREM1 profile, so a detector that exploits sleep
staging information has real signal to find.

Reproducibility contract: every epoch is generated from
``Generator(Philox(SeedSequence(seed, spawn_key=(stream, subject, epoch))))``
with stream 0 reserved for per-subject amplitude jitter, stream 1 for label
shuffling, and stream 2 for epoch samples. Generation order therefore never
affects output, and whole cohorts are pure functions of their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .data import (
    ALPHABETS,
    EPOCH_SAMPLES,
    TARGET_FS,
    EegRecord,
    Epoch,
    EpochSet,
)
from .edf import label_driving_epochs


class BadMixture(Exception):
    pass


_STREAM_SUBJECT = 0
_STREAM_LABELS = 1
_STREAM_SAMPLES = 2


@dataclass(frozen=True)
class StageProfile:
    """Spectral recipe for one label: (center Hz, bandwidth Hz, amplitude) bands."""

    stage: str
    bands: tuple[tuple[float, float, float], ...]
    noise_amplitude: float
    burst: tuple[float, float] | None = None  # (center Hz, duty cycle)

    def __post_init__(self) -> None:
        for center, bandwidth, amplitude in self.bands:
            if amplitude < 0:
                raise ValueError(f"negative band amplitude in {self.stage}")
            if center - bandwidth / 2 < 0 or center + bandwidth / 2 > TARGET_FS / 2:
                raise ValueError(
                    f"band ({center}, {bandwidth}) outside [0, {TARGET_FS / 2}] Hz"
                )
        if self.noise_amplitude < 0:
            raise ValueError("negative noise amplitude")
        if self.burst is not None:
            center, duty = self.burst
            if not 0 <= duty <= 1:
                raise ValueError(f"burst duty cycle {duty} outside [0, 1]")
            if not 0 <= center <= TARGET_FS / 2:
                raise ValueError(f"burst center {center} outside [0, {TARGET_FS / 2}]")

    def scaled(self, factors: Sequence[float], noise_factor: float) -> "StageProfile":
        bands = tuple(
            (c, bw, a * f) for (c, bw, a), f in zip(self.bands, factors)
        )
        return replace(
            self, bands=bands, noise_amplitude=self.noise_amplitude * noise_factor
        )


BASE_AMPLITUDE = 10.0

DEFAULT_PROFILES: dict[str, StageProfile] = {
    "Wake": StageProfile("Wake", ((10.0, 4.0, BASE_AMPLITUDE),), 3.0),
    "N1": StageProfile("N1", ((5.5, 3.0, BASE_AMPLITUDE),), 3.0),
    "N2": StageProfile(
        "N2", ((5.5, 3.0, 0.6 * BASE_AMPLITUDE),), 3.0, burst=(13.0, 0.35)
    ),
    "N3": StageProfile("N3", ((1.25, 1.5, 2 * BASE_AMPLITUDE),), 3.0),
    "N4": StageProfile("N4", ((1.25, 1.5, 3 * BASE_AMPLITUDE),), 3.0),
    # The transfer hypothesis baked into the test bed: micro-sleep shares
    # the early-NREM spectral signature.
    "MicroSleep": StageProfile("MicroSleep", ((5.5, 3.0, BASE_AMPLITUDE),), 3.0),
}

# Band each stage is expected to dominate, for separation checks. N3 and N4
# share the delta band and are distinguished by amplitude, not frequency.
DOMINANT_BANDS: dict[str, tuple[float, float]] = {
    "Wake": (8.0, 12.0),
    "N1": (4.0, 7.0),
    "N2": (12.0, 14.0),
    "N3": (0.5, 2.0),
    "N4": (0.5, 2.0),
}


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def generate_samples(profile: StageProfile, rng: np.random.Generator) -> np.ndarray:
    """3000 samples of band sinusoids + optional bursts + white noise."""
    t = np.arange(EPOCH_SAMPLES) / TARGET_FS
    x = np.zeros(EPOCH_SAMPLES)
    for center, bandwidth, amplitude in profile.bands:
        freq = rng.uniform(center - bandwidth / 2, center + bandwidth / 2)
        phase = rng.uniform(0, 2 * np.pi)
        x += amplitude * np.sin(2 * np.pi * freq * t + phase)
    if profile.burst is not None:
        center, duty = profile.burst
        phase = rng.uniform(0, 2 * np.pi)
        # gate one-second segments; burst rides at the loudest band's level
        gates = rng.random(EPOCH_SAMPLES // int(TARGET_FS)) < duty
        amplitude = max((a for _, _, a in profile.bands), default=1.0)
        mask = np.repeat(gates, int(TARGET_FS)).astype(np.float64)
        x += amplitude * mask * np.sin(2 * np.pi * center * t + phase)
    if profile.noise_amplitude > 0:
        x += profile.noise_amplitude * rng.standard_normal(EPOCH_SAMPLES)
    return x


def generate_epoch(
    profile: StageProfile,
    seed: int,
    subject_id: str = "synthetic",
    index: int = 0,
    subject_key: int = 0,
) -> Epoch:
    """One deterministic epoch; identical (profile, seed, keys) -> identical samples."""
    rng = _rng(seed, _STREAM_SAMPLES, subject_key, index)
    return Epoch(
        subject_id=subject_id,
        index=index,
        samples=generate_samples(profile, rng),
        label=profile.stage,
    )


def _subject_profiles(
    profiles: Mapping[str, StageProfile],
    seed: int,
    subject_key: int,
    jitter: float = 0.1,
) -> dict[str, StageProfile]:
    """Perturb every band amplitude (and noise) by a seeded factor in 1 +- jitter."""
    rng = _rng(seed, _STREAM_SUBJECT, subject_key)
    out = {}
    for stage in sorted(profiles):
        profile = profiles[stage]
        factors = rng.uniform(1 - jitter, 1 + jitter, size=len(profile.bands))
        noise_factor = rng.uniform(1 - jitter, 1 + jitter)
        out[stage] = profile.scaled(factors, noise_factor)
    return out


def _mixture_counts(
    class_mix: Mapping[str, float], alphabet: str, n: int
) -> dict[str, int]:
    labels = ALPHABETS[alphabet]
    unknown = set(class_mix) - set(labels)
    if unknown:
        raise BadMixture(f"mixture labels {sorted(unknown)} not in alphabet {alphabet}")
    weights = np.array([class_mix.get(label, 0.0) for label in labels])
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise BadMixture(f"class mix must be non-negative and sum to 1, got {dict(class_mix)}")
    ideal = weights * n
    counts = np.floor(ideal).astype(int)
    # largest-remainder rounding so counts sum exactly to n
    for i in np.argsort(-(ideal - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return {label: int(c) for label, c in zip(labels, counts)}


def generate_cohort(
    num_subjects: int,
    epochs_per_subject: int,
    alphabet: str = "SleepStages5",
    class_mix: Mapping[str, float] | None = None,
    seed: int = 0,
    profiles: Mapping[str, StageProfile] | None = None,
    subject_jitter: float = 0.1,
) -> EpochSet:
    """A multi-subject EpochSet with seeded subject variability.

    Per-subject label counts follow `class_mix` exactly (largest-remainder
    rounding), shuffled within each subject by a dedicated seeded stream.
    """
    if profiles is None:
        profiles = DEFAULT_PROFILES
    if class_mix is None:
        labels = ALPHABETS[alphabet]
        class_mix = {label: 1.0 / len(labels) for label in labels}
    counts = _mixture_counts(class_mix, alphabet, epochs_per_subject)
    epochs: list[Epoch] = []
    for subject_key in range(num_subjects):
        subject_id = f"S{subject_key + 1:02d}"
        adjusted = _subject_profiles(profiles, seed, subject_key, subject_jitter)
        sequence = [
            label for label in ALPHABETS[alphabet] for _ in range(counts[label])
        ]
        _rng(seed, _STREAM_LABELS, subject_key).shuffle(sequence)
        for i, label in enumerate(sequence):
            epochs.append(
                generate_epoch(
                    adjusted[label],
                    seed,
                    subject_id=subject_id,
                    index=i,
                    subject_key=subject_key,
                )
            )
    return EpochSet(epochs, alphabet)


def default_sleep_cohort(
    num_subjects: int = 10, epochs_per_subject: int = 100, seed: int = 2020
) -> EpochSet:
    """The frozen-seed five-class cohort used across the test suite."""
    return generate_cohort(num_subjects, epochs_per_subject, "SleepStages5", seed=seed)


@dataclass(frozen=True)
class TransferScenario:
    """Night-sleep cohort plus a KSS-labeled driving cohort."""

    sleep: EpochSet
    driving: EpochSet


def transfer_scenario(
    seed: int = 2020,
    driving_subjects: int = 4,
    blocks_per_subject: int = 10,
    sleep_subjects: int = 6,
    sleep_epochs_per_subject: int = 60,
    driving_noise: float = 12.0,
    profiles: Mapping[str, StageProfile] | None = None,
) -> TransferScenario:
    """Build the feature-transfer test bed.

    Driving subjects alternate between one and two sleepy five-minute blocks
    out of `blocks_per_subject`, giving 15% micro-sleep prevalence for the
    default sizes. Labels come from the actual KSS rule: a synthetic
    continuous record is cut and labeled from per-block self-reports
    (score 8 for sleepy blocks, 3 otherwise). Driving epochs carry heavier
    noise than night-sleep ones so the detection task stays hard enough for
    stage-feature fusion to matter.
    """
    if profiles is None:
        profiles = DEFAULT_PROFILES
    sleep = generate_cohort(
        sleep_subjects,
        sleep_epochs_per_subject,
        "SleepStages5",
        seed=seed,
        profiles=profiles,
    )
    epochs_per_block = int(300 / 30)
    driving_profiles = {
        stage: replace(p, noise_amplitude=driving_noise)
        for stage, p in profiles.items()
        if stage in ("Wake", "MicroSleep")
    }
    sets = []
    for subject_key in range(driving_subjects):
        # offset subject keys so driving subjects differ from sleep subjects
        key = 1000 + subject_key
        subject_id = f"D{subject_key + 1:02d}"
        adjusted = _subject_profiles(driving_profiles, seed, key)
        n_sleepy = 1 if subject_key % 2 == 0 else 2
        block_rng = _rng(seed, _STREAM_LABELS, key)
        sleepy_blocks = set(
            block_rng.choice(blocks_per_subject, size=n_sleepy, replace=False).tolist()
        )
        samples = []
        reports = []
        epoch_index = 0
        for block in range(blocks_per_subject):
            stage = "MicroSleep" if block in sleepy_blocks else "Wake"
            for _ in range(epochs_per_block):
                rng = _rng(seed, _STREAM_SAMPLES, key, epoch_index)
                samples.append(generate_samples(adjusted[stage], rng))
                epoch_index += 1
            reports.append(((block + 1) * 300.0, 8 if stage == "MicroSleep" else 3))
        record = EegRecord(
            subject_id=subject_id,
            channel="synthetic Pz-Oz",
            fs=TARGET_FS,
            samples=np.concatenate(samples),
            source=f"synthetic seed={seed} subject_key={key}",
        )
        sets.append(label_driving_epochs(record, reports))
    driving_epochs: list[Epoch] = []
    for s in sets:
        driving_epochs.extend(s.epochs)
    return TransferScenario(sleep=sleep, driving=EpochSet(driving_epochs, "MicroSleep2"))
