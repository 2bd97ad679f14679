"""Leave-one-subject-out evaluation: Cohen's kappa and alarm-rate metrics.

Kappa is chance-corrected agreement K = (p_o - p_e) / (1 - p_e + eps) with a
small eps guarding the all-agreement-by-chance case. Alarm rates come from
the 2x2 wake/micro-sleep confusion matrix with rows as actual classes; a
zero actual row is an error, never a silent NaN.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ALPHABETS, EpochSet

KAPPA_EPS = 1e-8


class EvalError(Exception):
    pass


class EmptyMatrix(EvalError):
    pass


class EmptyActualClass(EvalError):
    pass


class SingleSubject(EvalError):
    pass


class SubjectLeakage(EvalError):
    pass


@dataclass
class ConfusionMatrix:
    """C x C counts, rows = actual class, columns = predicted class."""

    counts: np.ndarray
    classes: tuple[str, ...]

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = len(self.classes)
        if self.counts.shape != (c, c):
            raise EvalError(
                f"confusion matrix shape {self.counts.shape} does not match "
                f"{c} classes"
            )
        if np.any(self.counts < 0):
            raise EvalError("confusion matrix counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        if np.any(rows == 0):
            raise EmptyActualClass(
                f"cannot row-normalize: empty actual class among {self.classes}"
            )
        return self.counts / rows


def confusion_from_pairs(
    y_true: Sequence[int], y_pred: Sequence[int], classes: Sequence[str]
) -> ConfusionMatrix:
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return ConfusionMatrix(counts, tuple(classes))


def cohen_kappa(cm: ConfusionMatrix, eps: float = KAPPA_EPS) -> float:
    """K = (p_o - p_e) / (1 - p_e + eps)."""
    total = cm.total
    if total == 0:
        raise EmptyMatrix("kappa is undefined for an empty confusion matrix")
    p_o = np.trace(cm.counts) / total
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    p_e = float(rows @ cols) / total**2
    return float((p_o - p_e) / (1.0 - p_e + eps))


@dataclass(frozen=True)
class AlarmRates:
    false_alarm: float
    true_alarm: float
    missed: float


def alarm_rates(cm: ConfusionMatrix) -> AlarmRates:
    """Rates for the wake/micro-sleep task.

    false_alarm = P(predict MicroSleep | actual Wake), true_alarm =
    P(predict MicroSleep | actual MicroSleep), missed = 1 - true_alarm.
    """
    if tuple(cm.classes) != tuple(ALPHABETS["MicroSleep2"]):
        raise EvalError(
            f"alarm rates need classes {ALPHABETS['MicroSleep2']}, got {cm.classes}"
        )
    wake_row = cm.counts[0].sum()
    ms_row = cm.counts[1].sum()
    if wake_row == 0:
        raise EmptyActualClass("no actual Wake epochs; false alarm rate undefined")
    if ms_row == 0:
        raise EmptyActualClass("no actual MicroSleep epochs; true alarm rate undefined")
    false_alarm = cm.counts[0, 1] / wake_row
    true_alarm = cm.counts[1, 1] / ms_row
    missed = cm.counts[1, 0] / ms_row
    return AlarmRates(float(false_alarm), float(true_alarm), float(missed))


@dataclass
class FoldReport:
    held_out_subject: str
    confusion: ConfusionMatrix
    kappa: float
    rates: AlarmRates | None = None

    def to_json_dict(self) -> dict:
        doc = {
            "held_out_subject": self.held_out_subject,
            "classes": list(self.confusion.classes),
            "confusion": self.confusion.counts.tolist(),
            "kappa": self.kappa,
        }
        if self.rates is not None:
            doc["false_alarm"] = self.rates.false_alarm
            doc["true_alarm"] = self.rates.true_alarm
            doc["missed"] = self.rates.missed
        return doc

    @staticmethod
    def from_json_dict(doc: dict) -> "FoldReport":
        rates = None
        if "false_alarm" in doc:
            rates = AlarmRates(doc["false_alarm"], doc["true_alarm"], doc["missed"])
        return FoldReport(
            held_out_subject=doc["held_out_subject"],
            confusion=ConfusionMatrix(np.array(doc["confusion"]), tuple(doc["classes"])),
            kappa=doc["kappa"],
            rates=rates,
        )


def loso_split(epoch_set: EpochSet) -> list[tuple[list[str], str]]:
    """One (train subjects, held-out subject) fold per subject, ordered by id."""
    subjects = sorted(epoch_set.subjects)
    if len(subjects) < 2:
        raise SingleSubject(
            f"leave-one-subject-out needs at least 2 subjects, got {len(subjects)}"
        )
    return [([s for s in subjects if s != held_out], held_out) for held_out in subjects]


@dataclass(frozen=True)
class ModelRecipe:
    """What to train per fold: model kind, hyperparameters, seed policy.

    The per-fold seed is base_seed + fold index. `train_overrides` adjusts
    the model's default TrainConfig; `arch_overrides` adjusts architecture
    sizes (for reduced-width runs).
    """

    kind: str  # "stager" | "utime" | "dsn"
    base_seed: int
    train_overrides: dict = field(default_factory=dict)
    arch_overrides: dict = field(default_factory=dict)


@dataclass
class LosoResult:
    folds: list[FoldReport]
    kappa_mean: float
    kappa_sd: float
    rates_mean: AlarmRates | None = None


def _assert_no_leakage(train_set: EpochSet, val_set: EpochSet, held_out: str) -> None:
    train_subjects = set(train_set.subjects)
    val_subjects = set(val_set.subjects)
    if val_subjects != {held_out} or train_subjects & val_subjects:
        raise SubjectLeakage(
            f"fold for {held_out!r} leaked subjects: train={sorted(train_subjects)}, "
            f"val={sorted(val_subjects)}"
        )


def run_loso(
    epoch_set: EpochSet,
    recipe: ModelRecipe,
    extractor=None,
) -> LosoResult:
    """Train from scratch per fold and aggregate unweighted fold kappas.

    The fusion extractor, when supplied, must already be trained; it is
    reused across folds without cross-validation. Binary tasks also report
    unweighted mean alarm rates.
    """
    from . import models as M  # local import; models imports metric helpers above

    labels = ALPHABETS[epoch_set.alphabet]
    folds = loso_split(epoch_set)
    reports: list[FoldReport] = []
    for fold_index, (train_subjects, held_out) in enumerate(folds):
        train_set = epoch_set.subset(train_subjects)
        val_set = epoch_set.subset([held_out])
        _assert_no_leakage(train_set, val_set, held_out)
        seed = recipe.base_seed + fold_index
        y_true = np.array([labels.index(ep.label) for ep in val_set], dtype=int)
        if recipe.kind == "stager":
            config = M.stager_train_config(seed, **recipe.train_overrides)
            model, _ = M.train_stager(train_set, config, **recipe.arch_overrides)
            specs = M.dsp.spectrogram_matrix(val_set).astype(np.float32)
            y_pred = M._predict_in_chunks(model.predict, specs)
        elif recipe.kind == "utime":
            config = M.utime_train_config(seed, **recipe.train_overrides)
            model, _ = M.train_utime(train_set, extractor, config, **recipe.arch_overrides)
            feats = (
                M.fusion_features(extractor, val_set) if extractor is not None else None
            )
            y_pred = M._predict_in_chunks(model.predict, val_set.sample_matrix(), feats)
        elif recipe.kind == "dsn":
            config = M.dsn_train_config(seed, **recipe.train_overrides)
            model, _ = M.train_dsn(train_set, extractor, config, **recipe.arch_overrides)
            feats = (
                M.fusion_features(extractor, val_set) if extractor is not None else None
            )
            y_pred = model.predict_sequence(val_set.sample_matrix(), feats)
        else:
            raise EvalError(f"unknown model kind {recipe.kind!r}")
        cm = confusion_from_pairs(y_true, y_pred, labels)
        rates = alarm_rates(cm) if epoch_set.alphabet == "MicroSleep2" else None
        reports.append(
            FoldReport(
                held_out_subject=held_out, confusion=cm, kappa=cohen_kappa(cm), rates=rates
            )
        )
    return aggregate_folds(reports)


def aggregate_folds(reports: list[FoldReport]) -> LosoResult:
    kappas = np.array([r.kappa for r in reports])
    rates_mean = None
    if all(r.rates is not None for r in reports) and reports:
        rates_mean = AlarmRates(
            float(np.mean([r.rates.false_alarm for r in reports])),
            float(np.mean([r.rates.true_alarm for r in reports])),
            float(np.mean([r.rates.missed for r in reports])),
        )
    return LosoResult(
        folds=reports,
        kappa_mean=float(kappas.mean()),
        kappa_sd=float(kappas.std()),
        rates_mean=rates_mean,
    )


def folds_to_json(result: LosoResult) -> str:
    doc = {
        "folds": [r.to_json_dict() for r in result.folds],
        "kappa_mean": result.kappa_mean,
        "kappa_sd": result.kappa_sd,
    }
    if result.rates_mean is not None:
        doc["rates_mean"] = {
            "false_alarm": result.rates_mean.false_alarm,
            "true_alarm": result.rates_mean.true_alarm,
            "missed": result.rates_mean.missed,
        }
    return json.dumps(doc, indent=2) + "\n"


def folds_from_json(text: str) -> LosoResult:
    doc = json.loads(text)
    return aggregate_folds([FoldReport.from_json_dict(d) for d in doc["folds"]])


def aggregate_csv(rows: list[tuple[str, bool, LosoResult]]) -> str:
    """Summary table `model,fusion,kappa_mean,kappa_sd,fa,ta,missed`."""
    buf = io.StringIO()
    buf.write("model,fusion,kappa_mean,kappa_sd,fa,ta,missed\n")
    for model_name, fusion, result in rows:
        if result.rates_mean is not None:
            fa = f"{result.rates_mean.false_alarm:.6f}"
            ta = f"{result.rates_mean.true_alarm:.6f}"
            missed = f"{result.rates_mean.missed:.6f}"
        else:
            fa = ta = missed = ""
        buf.write(
            f"{model_name},{str(fusion).lower()},{result.kappa_mean:.6f},"
            f"{result.kappa_sd:.6f},{fa},{ta},{missed}\n"
        )
    return buf.getvalue()
