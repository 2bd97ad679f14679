"""The three architectures and sleep-stage-feature fusion.

UNetStager: 2-D U-Net over 33x87 spectrograms (padded to 40x88), depth-3
encoder 16/32/64 with a 128-channel bottleneck, symmetric decoder with skip
concatenations, 1x1 out-convolution to 16 channels, global average pool, and
a dense 5-class head. Its pooled 16-d pre-dense vector is the transferable
sleep-stage feature.

UTimeDetector: same U-Net scheme with 1-D convolutions (kernel 5) over the
raw 3000-sample epoch; pooled 16-d vector, optionally concatenated with the
stage feature, feeds a 2-class dense head.

DsnDetector: two 1-D CNN streams with half-second and four-second filters,
flattened and concatenated into a frequency-temporal vector per epoch; a
bidirectional LSTM over ten-epoch windows adds sequential context; the dense
head consumes [LSTM state, frequency-temporal vector, optional stage
feature]. Training is two-phase: streams plus a temporary head on single
epochs, then the LSTM and final head on windows with the CNN warm-started
and fine-tuned. No class re-balancing of any kind.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dsp
from .data import ALPHABETS, EPOCH_SAMPLES, EpochSet
from .nn import (
    Adam,
    LayerSpec,
    Tensor,
    load_checkpoint,
    save_checkpoint,
)
from .nn import layers as L
from .nn.autograd import concat, relu, reshape, softmax_cross_entropy

FEATURE_DIM = 16
SPECTROGRAM_SHAPE = (33, 87)
STAGER_PAD_SHAPE = (40, 88)
DSN_SEQ_LEN = 10


class ModelError(Exception):
    pass


class UntrainedExtractor(ModelError):
    pass


class FusionShapeMismatch(ModelError):
    pass


class SequenceTooShort(ModelError):
    pass


class CrossSubjectWindow(ModelError):
    pass


class InsufficientSequences(ModelError):
    pass


@dataclass
class TrainConfig:
    """Optimizer/schedule settings for one training run."""

    seed: int
    lr: float
    weight_decay: float = 0.0
    batch_size: int = 8
    train_epochs: int = 5
    phase1_epochs: int | None = None  # DSN pre-training passes; defaults to train_epochs
    seq_len: int = DSN_SEQ_LEN
    target_kappa: float | None = None  # early stop on validation kappa


def stager_train_config(seed: int, **overrides) -> TrainConfig:
    return replace(
        TrainConfig(seed=seed, lr=1e-3, weight_decay=0.0, batch_size=128), **overrides
    )


def utime_train_config(seed: int, **overrides) -> TrainConfig:
    return replace(
        TrainConfig(seed=seed, lr=1e-4, weight_decay=1e-7, batch_size=8), **overrides
    )


def dsn_train_config(seed: int, **overrides) -> TrainConfig:
    return replace(
        TrainConfig(seed=seed, lr=1e-3, weight_decay=1e-6, batch_size=8), **overrides
    )


def _model_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(17,))))


class _Module:
    """Named (spec, params) registry with a flat parameter view."""

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = seed
        self.dtype = dtype
        self.rng = _model_rng(seed)
        self._layers: dict[str, tuple[LayerSpec, dict[str, Tensor]]] = {}
        self.trained = False
        self.train_hparams: dict | None = None

    def _add(self, name: str, spec: LayerSpec) -> None:
        self._layers[name] = (spec, L.init_params(spec, self.rng, self.dtype))

    def _apply(self, name: str, x, labels=None) -> Tensor:
        spec, params = self._layers[name]
        return L.forward(spec, params, x, labels=labels)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer_name, (_, params) in self._layers.items():
            for pname, p in params.items():
                out[f"{layer_name}.{pname}"] = p
        return out

    def layer_specs(self) -> dict[str, LayerSpec]:
        return {name: spec for name, (spec, _) in self._layers.items()}

    def param_digest(self, names: Sequence[str] | None = None) -> str:
        h = hashlib.sha256()
        for name, p in self.parameters().items():
            if names is None or any(name.startswith(n) for n in names):
                h.update(name.encode())
                h.update(p.data.astype("<f4").tobytes())
        return h.hexdigest()

    def _as_input(self, array: np.ndarray) -> Tensor:
        return Tensor(np.asarray(array, dtype=self.dtype))


def _conv_block_1d(module: _Module, prefix: str, c_in: int, c_out: int, kernel: int) -> None:
    module._add(f"{prefix}.conv1", LayerSpec("conv1d", in_channels=c_in, out_channels=c_out, kernel=kernel, padding="same"))
    module._add(f"{prefix}.conv2", LayerSpec("conv1d", in_channels=c_out, out_channels=c_out, kernel=kernel, padding="same"))


def _conv_block_2d(module: _Module, prefix: str, c_in: int, c_out: int) -> None:
    module._add(f"{prefix}.conv1", LayerSpec("conv2d", in_channels=c_in, out_channels=c_out, kernel=3, padding="same"))
    module._add(f"{prefix}.conv2", LayerSpec("conv2d", in_channels=c_out, out_channels=c_out, kernel=3, padding="same"))


class UNetStager(_Module):
    KIND = "unet5"
    NUM_CLASSES = 5

    def __init__(self, seed: int = 0, base_channels: int = 16, dtype=np.float32):
        super().__init__(seed, dtype)
        self.base_channels = base_channels
        c = base_channels
        _conv_block_2d(self, "enc1", 1, c)
        _conv_block_2d(self, "enc2", c, 2 * c)
        _conv_block_2d(self, "enc3", 2 * c, 4 * c)
        _conv_block_2d(self, "bottleneck", 4 * c, 8 * c)
        self._add("up3", LayerSpec("transposed_conv2d", in_channels=8 * c, out_channels=4 * c, kernel=2, stride=2))
        _conv_block_2d(self, "dec3", 8 * c, 4 * c)
        self._add("up2", LayerSpec("transposed_conv2d", in_channels=4 * c, out_channels=2 * c, kernel=2, stride=2))
        _conv_block_2d(self, "dec2", 4 * c, 2 * c)
        self._add("up1", LayerSpec("transposed_conv2d", in_channels=2 * c, out_channels=c, kernel=2, stride=2))
        _conv_block_2d(self, "dec1", 2 * c, c)
        self._add("out", LayerSpec("conv2d", in_channels=c, out_channels=FEATURE_DIM, kernel=1))
        self._add("pool", LayerSpec("maxpool", kernel=2, stride=2))
        self._add("head", LayerSpec("dense", in_channels=FEATURE_DIM, out_channels=self.NUM_CLASSES))

    def _pad_input(self, specs: np.ndarray) -> np.ndarray:
        """Zero-pad (B, 33, 87) to (B, 1, 40, 88); the pad region is always
        synthesized here, never read from data."""
        specs = np.asarray(specs, dtype=self.dtype)
        if specs.ndim == 2:
            specs = specs[None]
        if specs.shape[1:] != SPECTROGRAM_SHAPE:
            raise L.ShapeMismatch(
                f"stager expects spectrograms of shape {SPECTROGRAM_SHAPE}, "
                f"got {specs.shape[1:]}"
            )
        pad_h = STAGER_PAD_SHAPE[0] - SPECTROGRAM_SHAPE[0]
        pad_w = STAGER_PAD_SHAPE[1] - SPECTROGRAM_SHAPE[1]
        lo_h, hi_h = pad_h // 2, pad_h - pad_h // 2
        lo_w, hi_w = pad_w // 2, pad_w - pad_w // 2
        return np.pad(specs, ((0, 0), (lo_h, hi_h), (lo_w, hi_w)))[:, None]

    def _trunk(self, x: Tensor) -> Tensor:
        def block(prefix: str, t: Tensor) -> Tensor:
            t = relu(self._apply(f"{prefix}.conv1", t))
            return relu(self._apply(f"{prefix}.conv2", t))

        e1 = block("enc1", x)
        e2 = block("enc2", self._apply("pool", e1))
        e3 = block("enc3", self._apply("pool", e2))
        bott = block("bottleneck", self._apply("pool", e3))
        d3 = block("dec3", concat([self._apply("up3", bott), e3], axis=1))
        d2 = block("dec2", concat([self._apply("up2", d3), e2], axis=1))
        d1 = block("dec1", concat([self._apply("up1", d2), e1], axis=1))
        out = self._apply("out", d1)
        return L.global_avg_pool(out)

    def forward(self, specs: np.ndarray) -> Tensor:
        """(B, 33, 87) spectrograms -> (B, 5) logits."""
        pooled = self._trunk(Tensor(self._pad_input(specs)))
        return self._apply("head", pooled)

    def features(self, specs: np.ndarray) -> np.ndarray:
        """Pre-dense pooled 16-d representation, without gradient tracking."""
        return self._trunk(Tensor(self._pad_input(specs))).data

    def predict(self, specs: np.ndarray) -> np.ndarray:
        return self.forward(specs).data.argmax(axis=1)


def extract_sleep_features(stager: UNetStager, specs) -> np.ndarray:
    """f per epoch: the frozen stager's pooled out-convolution activations.

    Accepts a Spectrogram, a (33, 87) array, or a (B, 33, 87) batch; always
    returns (B, 16). Gradients never flow back into the stager.
    """
    if not stager.trained:
        raise UntrainedExtractor(
            "sleep-stage extractor must be trained before feature extraction"
        )
    if isinstance(specs, dsp.Spectrogram):
        specs = specs.values
    specs = np.asarray(specs)
    if specs.ndim == 2:
        specs = specs[None]
    return stager.features(specs)


class UTimeDetector(_Module):
    KIND = "utime2"
    NUM_CLASSES = 2

    def __init__(
        self,
        seed: int = 0,
        base_channels: int = 16,
        kernel: int = 5,
        fusion: bool = False,
        dtype=np.float32,
    ):
        super().__init__(seed, dtype)
        self.base_channels = base_channels
        self.kernel = kernel
        self.fusion = fusion
        c = base_channels
        _conv_block_1d(self, "enc1", 1, c, kernel)
        _conv_block_1d(self, "enc2", c, 2 * c, kernel)
        _conv_block_1d(self, "enc3", 2 * c, 4 * c, kernel)
        _conv_block_1d(self, "bottleneck", 4 * c, 8 * c, kernel)
        self._add("up3", LayerSpec("transposed_conv1d", in_channels=8 * c, out_channels=4 * c, kernel=2, stride=2))
        _conv_block_1d(self, "dec3", 8 * c, 4 * c, kernel)
        self._add("up2", LayerSpec("transposed_conv1d", in_channels=4 * c, out_channels=2 * c, kernel=2, stride=2))
        _conv_block_1d(self, "dec2", 4 * c, 2 * c, kernel)
        self._add("up1", LayerSpec("transposed_conv1d", in_channels=2 * c, out_channels=c, kernel=2, stride=2))
        _conv_block_1d(self, "dec1", 2 * c, c, kernel)
        self._add("out", LayerSpec("conv1d", in_channels=c, out_channels=FEATURE_DIM, kernel=1))
        self._add("pool", LayerSpec("maxpool", kernel=2, stride=2))
        head_in = FEATURE_DIM + (FEATURE_DIM if fusion else 0)
        self._add("head", LayerSpec("dense", in_channels=head_in, out_channels=self.NUM_CLASSES))

    def _check_fusion(self, batch: int, features: np.ndarray | None) -> np.ndarray | None:
        if self.fusion:
            if features is None:
                raise FusionShapeMismatch(
                    "detector was built with fusion; stage features are required"
                )
            features = np.asarray(features, dtype=self.dtype)
            if features.shape != (batch, FEATURE_DIM):
                raise FusionShapeMismatch(
                    f"stage features must have shape ({batch}, {FEATURE_DIM}), "
                    f"got {features.shape}"
                )
            return features
        if features is not None:
            raise FusionShapeMismatch(
                "detector was built without fusion; unexpected stage features"
            )
        return None

    def _pooled(self, epochs: np.ndarray) -> Tensor:
        x = np.asarray(epochs, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != EPOCH_SAMPLES:
            raise L.ShapeMismatch(
                f"u-time expects epochs of {EPOCH_SAMPLES} samples, got {x.shape[1]}"
            )
        t = Tensor(x[:, None, :])

        def block(prefix: str, h: Tensor) -> Tensor:
            h = relu(self._apply(f"{prefix}.conv1", h))
            return relu(self._apply(f"{prefix}.conv2", h))

        e1 = block("enc1", t)
        e2 = block("enc2", self._apply("pool", e1))
        e3 = block("enc3", self._apply("pool", e2))
        bott = block("bottleneck", self._apply("pool", e3))
        d3 = block("dec3", concat([self._apply("up3", bott), e3], axis=1))
        d2 = block("dec2", concat([self._apply("up2", d3), e2], axis=1))
        d1 = block("dec1", concat([self._apply("up1", d2), e1], axis=1))
        return L.global_avg_pool(self._apply("out", d1))

    def forward(self, epochs: np.ndarray, features: np.ndarray | None = None) -> Tensor:
        """(B, 3000) raw epochs [+ (B, 16) stage features] -> (B, 2) logits."""
        x = np.atleast_2d(np.asarray(epochs, dtype=self.dtype))
        features = self._check_fusion(x.shape[0], features)
        pooled = self._pooled(x)
        if features is not None:
            pooled = concat([pooled, Tensor(features)], axis=1)
        return self._apply("head", pooled)

    def predict(self, epochs: np.ndarray, features: np.ndarray | None = None) -> np.ndarray:
        return self.forward(epochs, features).data.argmax(axis=1)


class DsnDetector(_Module):
    KIND = "dsn2"
    NUM_CLASSES = 2

    # (prefix, conv1 kernel, conv1 stride, pool1, pool2)
    STREAMS = (("fine", 50, 6, 8, 4), ("coarse", 400, 50, 4, 2))

    def __init__(
        self,
        seed: int = 0,
        stream_channels: int = 32,
        hidden_size: int = 64,
        seq_len: int = DSN_SEQ_LEN,
        fusion: bool = False,
        dtype=np.float32,
    ):
        super().__init__(seed, dtype)
        self.stream_channels = stream_channels
        self.hidden_size = hidden_size
        self.seq_len = seq_len
        self.fusion = fusion
        c = stream_channels
        for prefix, k1, s1, p1, p2 in self.STREAMS:
            self._add(f"{prefix}.conv1", LayerSpec("conv1d", in_channels=1, out_channels=c, kernel=k1, stride=s1, padding="same"))
            self._add(f"{prefix}.pool1", LayerSpec("maxpool", kernel=p1, stride=p1))
            self._add(f"{prefix}.conv2", LayerSpec("conv1d", in_channels=c, out_channels=2 * c, kernel=8, padding="same"))
            self._add(f"{prefix}.conv3", LayerSpec("conv1d", in_channels=2 * c, out_channels=2 * c, kernel=8, padding="same"))
            self._add(f"{prefix}.pool2", LayerSpec("maxpool", kernel=p2, stride=p2))
        self.feature_len = self._stream_feature_len()
        fusion_extra = FEATURE_DIM if fusion else 0
        self._add("phase1_head", LayerSpec("dense", in_channels=self.feature_len + fusion_extra, out_channels=self.NUM_CLASSES))
        self._add("lstm", LayerSpec("bilstm", in_channels=self.feature_len, hidden_size=hidden_size))
        head_in = 2 * hidden_size + self.feature_len + fusion_extra
        self._add("head", LayerSpec("dense", in_channels=head_in, out_channels=self.NUM_CLASSES))

    def _stream_feature_len(self) -> int:
        total = 0
        for prefix, k1, s1, p1, p2 in self.STREAMS:
            shape = (1, 1, EPOCH_SAMPLES)
            for name in ("conv1", "pool1", "conv2", "conv3", "pool2"):
                spec, _ = self._layers[f"{prefix}.{name}"]
                shape = L.output_shape(spec, shape)
            total += shape[1] * shape[2]
        return total

    def cnn_features(self, epochs: np.ndarray) -> Tensor:
        """(B, 3000) -> (B, feature_len) frequency-temporal vectors."""
        x = np.atleast_2d(np.asarray(epochs, dtype=self.dtype))
        if x.shape[1] != EPOCH_SAMPLES:
            raise L.ShapeMismatch(
                f"dsn expects epochs of {EPOCH_SAMPLES} samples, got {x.shape[1]}"
            )
        t = Tensor(x[:, None, :])
        outs = []
        for prefix, *_ in self.STREAMS:
            h = relu(self._apply(f"{prefix}.conv1", t))
            h = self._apply(f"{prefix}.pool1", h)
            h = relu(self._apply(f"{prefix}.conv2", h))
            h = relu(self._apply(f"{prefix}.conv3", h))
            h = self._apply(f"{prefix}.pool2", h)
            outs.append(reshape(h, (h.shape[0], h.shape[1] * h.shape[2])))
        return concat(outs, axis=1)

    def _check_fusion(self, shape: tuple[int, ...], features) -> np.ndarray | None:
        if self.fusion:
            if features is None:
                raise FusionShapeMismatch(
                    "detector was built with fusion; stage features are required"
                )
            features = np.asarray(features, dtype=self.dtype)
            if features.shape != shape:
                raise FusionShapeMismatch(
                    f"stage features must have shape {shape}, got {features.shape}"
                )
            return features
        if features is not None:
            raise FusionShapeMismatch(
                "detector was built without fusion; unexpected stage features"
            )
        return None

    def phase1_forward(self, epochs: np.ndarray, features: np.ndarray | None = None) -> Tensor:
        """Single-epoch logits through the temporary pre-training head."""
        x = np.atleast_2d(np.asarray(epochs, dtype=self.dtype))
        features = self._check_fusion((x.shape[0], FEATURE_DIM), features)
        ft = self.cnn_features(x)
        if features is not None:
            ft = concat([ft, Tensor(features)], axis=1)
        return self._apply("phase1_head", ft)

    def forward(
        self,
        windows: np.ndarray,
        features: np.ndarray | None = None,
        subject_ids: Sequence[str] | None = None,
    ) -> Tensor:
        """(B, L, 3000) windows [+ (B, L, 16) features] -> (B, L, 2) logits.

        A single (L, 3000) window is promoted to a batch of one. Windows must
        hold exactly `seq_len` consecutive epochs of one subject.
        """
        w = np.asarray(windows, dtype=self.dtype)
        if w.ndim == 2:
            w = w[None]
        if w.ndim != 3 or w.shape[2] != EPOCH_SAMPLES:
            raise L.ShapeMismatch(
                f"dsn expects (B, L, {EPOCH_SAMPLES}) windows, got {windows.shape}"
            )
        batch, length = w.shape[0], w.shape[1]
        if length != self.seq_len:
            raise SequenceTooShort(
                f"dsn windows must hold exactly {self.seq_len} epochs, got {length}"
            )
        if subject_ids is not None and len(set(subject_ids)) > 1:
            raise CrossSubjectWindow(
                f"window mixes subjects {sorted(set(subject_ids))}"
            )
        features = self._check_fusion((batch, length, FEATURE_DIM), features)
        ft = self.cnn_features(w.reshape(batch * length, EPOCH_SAMPLES))
        ft_seq = reshape(ft, (batch, length, self.feature_len))
        states = self._apply("lstm", ft_seq)
        pieces = [states, ft_seq]
        if features is not None:
            pieces.append(Tensor(features))
        combined = concat(pieces, axis=2)
        flat = reshape(combined, (batch * length, combined.shape[2]))
        logits = self._apply("head", flat)
        return reshape(logits, (batch, length, self.NUM_CLASSES))

    def predict_sequence(self, samples: np.ndarray, features: np.ndarray | None = None) -> np.ndarray:
        """Per-epoch predictions for one subject's N consecutive epochs.

        Tiles non-overlapping windows; the remainder is covered by one final
        end-aligned window whose overlapping positions are discarded.
        """
        n = len(samples)
        if n < self.seq_len:
            raise InsufficientSequences(
                f"subject has {n} epochs, fewer than the window length {self.seq_len}"
            )
        preds = np.empty(n, dtype=int)
        starts = list(range(0, n - self.seq_len + 1, self.seq_len))
        tail = n % self.seq_len
        if tail:
            starts.append(n - self.seq_len)
        for start in starts:
            window = samples[start : start + self.seq_len]
            feats = None
            if features is not None:
                feats = features[None, start : start + self.seq_len]
            logits = self.forward(window[None], feats)
            window_preds = logits.data[0].argmax(axis=1)
            if tail and start == n - self.seq_len:
                preds[n - tail :] = window_preds[self.seq_len - tail :]
            else:
                preds[start : start + self.seq_len] = window_preds
        return preds

    def cnn_digest(self) -> str:
        return self.param_digest([f"{p}." for p, *_ in self.STREAMS])


# --- training ----------------------------------------------------------------


def _train_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(23,))))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _label_codes(epoch_set: EpochSet) -> np.ndarray:
    labels = ALPHABETS[epoch_set.alphabet]
    return np.array([labels.index(ep.label) for ep in epoch_set], dtype=int)


def _quick_kappa(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    from .evaluate import ConfusionMatrix, cohen_kappa

    cm = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(cm, (y_true, y_pred), 1)
    return cohen_kappa(ConfusionMatrix(cm, tuple(str(i) for i in range(num_classes))))


def fusion_features(extractor: UNetStager, epoch_set: EpochSet, stft_kwargs: dict | None = None) -> np.ndarray:
    """Stage features for every epoch in set order, (N, 16) float32."""
    specs = dsp.spectrogram_matrix(epoch_set, **(stft_kwargs or {}))
    out = np.empty((len(epoch_set), FEATURE_DIM), dtype=np.float32)
    # chunk to bound the stager's activation memory
    for start in range(0, len(epoch_set), 256):
        out[start : start + 256] = extract_sleep_features(
            extractor, specs[start : start + 256]
        )
    return out


@dataclass
class TrainHistory:
    entries: list[dict] = field(default_factory=list)
    label_counts: list[dict] = field(default_factory=list)
    phase1_entries: list[dict] = field(default_factory=list)
    phase1_label_counts: list[dict] = field(default_factory=list)
    phase1_cnn_digest: str | None = None
    phase2_initial_cnn_digest: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.entries]


def train_stager(
    data: EpochSet,
    config: TrainConfig,
    val_set: EpochSet | None = None,
    base_channels: int = 16,
) -> tuple[UNetStager, TrainHistory]:
    """Mini-batch Adam training of the five-class stager.

    Shuffles every pass with a seeded stream, keeps the last short batch,
    and records per-pass loss and kappa. With `target_kappa` set and a
    validation set given, stops as soon as the held-out kappa reaches it.
    """
    if data.alphabet != "SleepStages5":
        raise ValueError(f"stager needs SleepStages5 data, got {data.alphabet}")
    specs = dsp.spectrogram_matrix(data).astype(np.float32)
    codes = _label_codes(data)
    model = UNetStager(seed=config.seed, base_channels=base_channels)
    optimizer = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = _train_rng(config.seed)
    history = TrainHistory()
    val_specs = None
    if val_set is not None:
        val_specs = dsp.spectrogram_matrix(val_set).astype(np.float32)
        val_codes = _label_codes(val_set)
    for sweep in range(config.train_epochs):
        losses = []
        weights = []
        preds = np.empty(len(codes), dtype=int)
        counts = {label: 0 for label in ALPHABETS[data.alphabet]}
        for batch in _batches(len(codes), config.batch_size, rng):
            logits = model.forward(specs[batch])
            loss = softmax_cross_entropy(logits, codes[batch])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.data))
            weights.append(len(batch))
            preds[batch] = logits.data.argmax(axis=1)
            for c in codes[batch]:
                counts[ALPHABETS[data.alphabet][c]] += 1
        entry = {
            "epoch": sweep,
            "loss": float(np.average(losses, weights=weights)),
            "train_kappa": _quick_kappa(codes, preds, model.NUM_CLASSES),
        }
        history.label_counts.append(counts)
        if val_specs is not None:
            val_preds = _predict_in_chunks(model.predict, val_specs)
            entry["val_kappa"] = _quick_kappa(val_codes, val_preds, model.NUM_CLASSES)
        history.entries.append(entry)
        model.trained = True
        if (
            config.target_kappa is not None
            and entry.get("val_kappa", -np.inf) >= config.target_kappa
        ):
            break
    model.train_hparams = {
        "lr": config.lr,
        "weight_decay": config.weight_decay,
        "batch_size": config.batch_size,
        "train_epochs": config.train_epochs,
        "seed": config.seed,
    }
    return model, history


def _predict_in_chunks(predict: Callable, inputs: np.ndarray, *extra, chunk: int = 256) -> np.ndarray:
    parts = []
    for start in range(0, len(inputs), chunk):
        args = [inputs[start : start + chunk]]
        for e in extra:
            args.append(None if e is None else e[start : start + chunk])
        parts.append(predict(*args))
    return np.concatenate(parts) if parts else np.empty(0, dtype=int)


def train_utime(
    data: EpochSet,
    extractor: UNetStager | None = None,
    config: TrainConfig | None = None,
    base_channels: int = 16,
) -> tuple[UTimeDetector, TrainHistory]:
    """Single-phase training of the 1-D U-Net detector on per-epoch samples."""
    if data.alphabet != "MicroSleep2":
        raise ValueError(f"u-time needs MicroSleep2 data, got {data.alphabet}")
    if config is None:
        raise ValueError("a TrainConfig is required (seeds are never implicit)")
    samples = data.sample_matrix()
    codes = _label_codes(data)
    features = fusion_features(extractor, data) if extractor is not None else None
    model = UTimeDetector(
        seed=config.seed, base_channels=base_channels, fusion=extractor is not None
    )
    optimizer = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = _train_rng(config.seed)
    history = TrainHistory()
    for sweep in range(config.train_epochs):
        losses, weights = [], []
        counts = {label: 0 for label in ALPHABETS[data.alphabet]}
        for batch in _batches(len(codes), config.batch_size, rng):
            feats = features[batch] if features is not None else None
            logits = model.forward(samples[batch], feats)
            loss = softmax_cross_entropy(logits, codes[batch])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.data))
            weights.append(len(batch))
            for c in codes[batch]:
                counts[ALPHABETS[data.alphabet][c]] += 1
        history.entries.append(
            {"epoch": sweep, "loss": float(np.average(losses, weights=weights))}
        )
        history.label_counts.append(counts)
        model.trained = True
    model.train_hparams = {
        "lr": config.lr,
        "weight_decay": config.weight_decay,
        "batch_size": config.batch_size,
        "train_epochs": config.train_epochs,
        "seed": config.seed,
        "fusion": extractor is not None,
    }
    return model, history


def subject_windows(data: EpochSet, seq_len: int) -> list[tuple[str, int]]:
    """(subject_id, start position within subject) for every non-overlapping
    full window; subjects with fewer than seq_len epochs contribute none."""
    windows = []
    for sid in data.subjects:
        n = len(data.subject_epochs(sid))
        for start in range(0, n - seq_len + 1, seq_len):
            windows.append((sid, start))
    return windows


def train_dsn(
    data: EpochSet,
    extractor: UNetStager | None = None,
    config: TrainConfig | None = None,
    stream_channels: int = 32,
    hidden_size: int = 64,
) -> tuple[DsnDetector, TrainHistory]:
    """Two-phase DSN training.

    Phase 1 fits the CNN streams plus a temporary dense head on single
    epochs; phase 2 fits the BiLSTM and final head on seq_len windows with
    the CNN warm-started from phase 1 and fine-tuned. Sampling is plain
    shuffling with no over-sampling or re-weighting of the minority class.
    """
    if data.alphabet != "MicroSleep2":
        raise ValueError(f"dsn needs MicroSleep2 data, got {data.alphabet}")
    if config is None:
        raise ValueError("a TrainConfig is required (seeds are never implicit)")
    samples = data.sample_matrix()
    codes = _label_codes(data)
    features = fusion_features(extractor, data) if extractor is not None else None
    model = DsnDetector(
        seed=config.seed,
        stream_channels=stream_channels,
        hidden_size=hidden_size,
        seq_len=config.seq_len,
        fusion=extractor is not None,
    )
    rng = _train_rng(config.seed)
    history = TrainHistory()
    labels = ALPHABETS[data.alphabet]

    phase1_params = {
        name: p
        for name, p in model.parameters().items()
        if name.startswith(("fine.", "coarse.", "phase1_head."))
    }
    optimizer1 = Adam(phase1_params, lr=config.lr, weight_decay=config.weight_decay)
    phase1_epochs = config.phase1_epochs if config.phase1_epochs is not None else config.train_epochs
    for sweep in range(phase1_epochs):
        losses, weights = [], []
        counts = {label: 0 for label in labels}
        for batch in _batches(len(codes), config.batch_size, rng):
            feats = features[batch] if features is not None else None
            logits = model.phase1_forward(samples[batch], feats)
            loss = softmax_cross_entropy(logits, codes[batch])
            optimizer1.zero_grad()
            loss.backward()
            optimizer1.step()
            losses.append(float(loss.data))
            weights.append(len(batch))
            for c in codes[batch]:
                counts[labels[c]] += 1
        history.phase1_entries.append(
            {"epoch": sweep, "loss": float(np.average(losses, weights=weights))}
        )
        history.phase1_label_counts.append(counts)
    history.phase1_cnn_digest = model.cnn_digest()

    windows = subject_windows(data, config.seq_len)
    if not windows:
        raise InsufficientSequences(
            f"no subject has {config.seq_len} epochs; cannot build training windows"
        )
    window_samples = np.empty((len(windows), config.seq_len, EPOCH_SAMPLES), dtype=np.float32)
    window_codes = np.empty((len(windows), config.seq_len), dtype=int)
    window_features = (
        np.empty((len(windows), config.seq_len, FEATURE_DIM), dtype=np.float32)
        if features is not None
        else None
    )
    offsets = {}
    pos = 0
    for sid in data.subjects:
        offsets[sid] = pos
        pos += len(data.subject_epochs(sid))
    for w, (sid, start) in enumerate(windows):
        lo = offsets[sid] + start
        window_samples[w] = samples[lo : lo + config.seq_len]
        window_codes[w] = codes[lo : lo + config.seq_len]
        if window_features is not None:
            window_features[w] = features[lo : lo + config.seq_len]

    history.phase2_initial_cnn_digest = model.cnn_digest()
    phase2_params = {
        name: p
        for name, p in model.parameters().items()
        if name.startswith(("fine.", "coarse.", "lstm.", "head."))
    }
    optimizer2 = Adam(phase2_params, lr=config.lr, weight_decay=config.weight_decay)
    for sweep in range(config.train_epochs):
        losses, weights = [], []
        counts = {label: 0 for label in labels}
        for batch in _batches(len(windows), config.batch_size, rng):
            feats = window_features[batch] if window_features is not None else None
            logits = model.forward(window_samples[batch], feats)
            flat = reshape(logits, (len(batch) * config.seq_len, model.NUM_CLASSES))
            loss = softmax_cross_entropy(flat, window_codes[batch].reshape(-1))
            optimizer2.zero_grad()
            loss.backward()
            optimizer2.step()
            losses.append(float(loss.data))
            weights.append(len(batch))
            for c in window_codes[batch].reshape(-1):
                counts[labels[c]] += 1
        history.entries.append(
            {"epoch": sweep, "loss": float(np.average(losses, weights=weights))}
        )
        history.label_counts.append(counts)
    model.trained = config.train_epochs > 0 or phase1_epochs > 0
    model.train_hparams = {
        "lr": config.lr,
        "weight_decay": config.weight_decay,
        "batch_size": config.batch_size,
        "train_epochs": config.train_epochs,
        "phase1_epochs": phase1_epochs,
        "seq_len": config.seq_len,
        "seed": config.seed,
        "fusion": extractor is not None,
    }
    return model, history


# --- checkpoints ---------------------------------------------------------------


def save_model(model: _Module, stem: str | Path) -> None:
    manifest: dict = {
        "model_kind": model.KIND,
        "seed": model.seed,
        "trained": model.trained,
        "train_hparams": model.train_hparams,
        "layer_specs": {
            name: {
                "kind": s.kind,
                "in_channels": s.in_channels,
                "out_channels": s.out_channels,
                "kernel": list(s.kernel) if isinstance(s.kernel, tuple) else s.kernel,
                "stride": s.stride,
                "padding": s.padding,
                "hidden_size": s.hidden_size,
                "axis": s.axis,
            }
            for name, s in model.layer_specs().items()
        },
    }
    if isinstance(model, UNetStager):
        manifest["arch"] = {"base_channels": model.base_channels}
    elif isinstance(model, UTimeDetector):
        manifest["arch"] = {
            "base_channels": model.base_channels,
            "kernel": model.kernel,
        }
        manifest["fusion"] = model.fusion
    elif isinstance(model, DsnDetector):
        manifest["arch"] = {
            "stream_channels": model.stream_channels,
            "hidden_size": model.hidden_size,
            "seq_len": model.seq_len,
        }
        manifest["fusion"] = model.fusion
    save_checkpoint(stem, manifest, model.parameters())


def load_model(stem: str | Path) -> UNetStager | UTimeDetector | DsnDetector:
    manifest, arrays = load_checkpoint(stem)
    kind = manifest["model_kind"]
    arch = manifest.get("arch", {})
    if kind == UNetStager.KIND:
        model: _Module = UNetStager(seed=manifest["seed"], **arch)
    elif kind == UTimeDetector.KIND:
        model = UTimeDetector(seed=manifest["seed"], fusion=manifest["fusion"], **arch)
    elif kind == DsnDetector.KIND:
        model = DsnDetector(seed=manifest["seed"], fusion=manifest["fusion"], **arch)
    else:
        raise ModelError(f"unknown model kind {kind!r}")
    params = model.parameters()
    if set(params) != set(arrays):
        raise ModelError("checkpoint parameters do not match the declared architecture")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise ModelError(
                f"parameter {name!r} shape {arrays[name].shape} does not match "
                f"architecture shape {p.data.shape}"
            )
        p.data = arrays[name].astype(model.dtype)
    model.trained = manifest.get("trained", False)
    model.train_hparams = manifest.get("train_hparams")
    return model
