"""Micro-sleep detection from single-channel EEG.

Pipeline: parse or synthesize 30-s EEG epochs, compute power spectrograms,
embed with exact t-SNE for distribution analysis, train a five-class sleep
stager, transfer its pre-classifier features into micro-sleep detectors, and
evaluate with leave-one-subject-out Cohen's kappa and alarm rates.
"""

__version__ = "0.1.0"

from .data import (
    ALPHABETS,
    EPOCH_SAMPLES,
    TARGET_FS,
    Annotation,
    EegRecord,
    Epoch,
    EpochSet,
    load_epoch_set,
    save_epoch_set,
)

__all__ = [
    "ALPHABETS",
    "EPOCH_SAMPLES",
    "TARGET_FS",
    "Annotation",
    "EegRecord",
    "Epoch",
    "EpochSet",
    "load_epoch_set",
    "save_epoch_set",
    "__version__",
]
