"""Power spectrograms of 30-s epochs via the short-time Fourier transform.

A 3000-sample epoch at 100 Hz with a 64-sample Hann window and hop 34 yields
33 one-sided frequency bins by 87 frames. Values are squared magnitudes in
signal-power units; no dB conversion and no per-window normalization.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .data import Epoch, EpochSet

DEFAULT_WINDOW = 64
DEFAULT_HOP = 34
DEFAULT_FS = 100.0


class DspError(Exception):
    pass


class InputTooShort(DspError):
    pass


class NonFiniteInput(DspError):
    pass


@dataclass
class Spectrogram:
    """One-sided power spectrogram, frequency bins by time frames."""

    values: np.ndarray
    bin_hz: float
    hop_s: float

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DspError(f"spectrogram must be 2-D, got shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.values.shape[0]) * self.bin_hz

    @property
    def frame_times(self) -> np.ndarray:
        """Frame centers in seconds from epoch start."""
        window_s = 1.0 / self.bin_hz
        return np.arange(self.values.shape[1]) * self.hop_s + window_s / 2


def hann_window(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / (length - 1))


def stft_power(
    epoch: np.ndarray,
    window_len: int = DEFAULT_WINDOW,
    hop: int = DEFAULT_HOP,
    fs: float = DEFAULT_FS,
) -> Spectrogram:
    """Hann-windowed one-sided power spectrogram of a single epoch.

    Frame count is floor((n - window_len) / hop) + 1; no zero padding, so a
    trailing partial frame is dropped.
    """
    x = np.asarray(epoch, dtype=np.float64)
    if x.ndim != 1:
        raise DspError(f"epoch must be 1-D, got shape {x.shape}")
    if window_len % 2 != 0:
        raise DspError(f"window length must be even, got {window_len}")
    if x.size < window_len:
        raise InputTooShort(
            f"epoch has {x.size} samples, below window length {window_len}"
        )
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("epoch contains NaN or infinite samples")
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop]
    windowed = frames * hann_window(window_len)
    spectrum = np.fft.rfft(windowed, axis=1)
    power = (spectrum.real**2 + spectrum.imag**2).T
    return Spectrogram(values=power, bin_hz=fs / window_len, hop_s=hop / fs)


def batch_spectrograms(
    epoch_set: EpochSet,
    window_len: int = DEFAULT_WINDOW,
    hop: int = DEFAULT_HOP,
    fs: float = DEFAULT_FS,
) -> list[tuple[Spectrogram, str, str]]:
    """Order-preserving (spectrogram, label, subject_id) per epoch."""
    out = []
    for i, ep in enumerate(epoch_set):
        try:
            spec = stft_power(ep.samples, window_len=window_len, hop=hop, fs=fs)
        except DspError as exc:
            raise type(exc)(f"epoch {i} (subject {ep.subject_id}): {exc}") from exc
        out.append((spec, ep.label, ep.subject_id))
    return out


def spectrogram_matrix(epoch_set: EpochSet, **kwargs) -> np.ndarray:
    """All spectrograms stacked as (n, bins, frames) float64."""
    triples = batch_spectrograms(epoch_set, **kwargs)
    if not triples:
        return np.zeros((0, 0, 0))
    return np.stack([spec.values for spec, _, _ in triples])


def spectrogram_csv(spec: Spectrogram) -> str:
    """Figure-ready CSV: header row of frame times, first column of bin Hz."""
    buf = io.StringIO()
    times = ",".join(f"{t:.6g}" for t in spec.frame_times)
    buf.write(f"freq_hz,{times}\n")
    for f, row in zip(spec.frequencies, spec.values):
        cells = ",".join(f"{v:.10g}" for v in row)
        buf.write(f"{f:.6g},{cells}\n")
    return buf.getvalue()
