"""Layer inventory: specs, parameter initialization, and forward functions.

Convolutions run as one batched GEMM per kernel tap, which keeps memory flat
(no im2col buffers) while staying BLAS-bound. 'same' padding splits the
deficit symmetrically with the extra zero on the high side. Max pooling uses
valid semantics: a trailing partial window is dropped.

Data layouts: conv1d/maxpool on (B, C, L); conv2d on (B, C, H, W); dense on
(B, F); bilstm on (B, T, F) returning (B, T, 2H) with forward and backward
hidden states concatenated per step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import (
    ShapeMismatch,
    Tensor,
    add,
    concat,
    index,
    matmul,
    mean,
    mul,
    relu as relu_op,
    sigmoid,
    softmax_cross_entropy,
    stack,
    tanh,
)

LAYER_KINDS = (
    "conv1d",
    "conv2d",
    "transposed_conv1d",
    "transposed_conv2d",
    "maxpool",
    "relu",
    "dense",
    "bilstm",
    "concat",
    "global_avg_pool",
    "softmax_xent",
)

_PARAMETRIC = {"conv1d", "conv2d", "transposed_conv1d", "transposed_conv2d", "dense", "bilstm"}


@dataclass(frozen=True)
class LayerSpec:
    """One layer's kind plus its hyperparameters (unused fields stay None)."""

    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | tuple[int, int] | None = None
    stride: int = 1
    padding: str = "valid"
    hidden_size: int | None = None
    axis: int = 1

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.kind in ("conv1d", "conv2d", "transposed_conv1d", "transposed_conv2d", "dense"):
            if not (self.in_channels and self.in_channels > 0):
                raise ValueError(f"{self.kind} needs positive in_channels")
            if not (self.out_channels and self.out_channels > 0):
                raise ValueError(f"{self.kind} needs positive out_channels")
        if self.kind in ("conv1d", "transposed_conv1d", "maxpool"):
            if self.kernel is not None and not isinstance(self.kernel, int):
                raise ValueError(f"{self.kind} kernel must be an int")
        if self.kind in ("conv1d", "conv2d", "transposed_conv1d", "transposed_conv2d", "maxpool"):
            k = self.kernel
            if k is None:
                raise ValueError(f"{self.kind} needs a kernel size")
            sizes = (k,) if isinstance(k, int) else tuple(k)
            if any(s < 1 for s in sizes):
                raise ValueError(f"{self.kind} kernel must be positive, got {k}")
        if self.kind == "bilstm" and not (self.hidden_size and self.hidden_size > 0):
            raise ValueError("bilstm needs positive hidden_size")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        if self.kind == "conv1d":
            return {"w": (self.out_channels, self.in_channels, k), "b": (self.out_channels,)}
        if self.kind == "conv2d":
            kh, kw = (k, k) if isinstance(k, int) else k
            return {"w": (self.out_channels, self.in_channels, kh, kw), "b": (self.out_channels,)}
        if self.kind == "transposed_conv1d":
            return {"w": (self.in_channels, self.out_channels, k), "b": (self.out_channels,)}
        if self.kind == "transposed_conv2d":
            kh, kw = (k, k) if isinstance(k, int) else k
            return {"w": (self.in_channels, self.out_channels, kh, kw), "b": (self.out_channels,)}
        if self.kind == "dense":
            return {"w": (self.in_channels, self.out_channels), "b": (self.out_channels,)}
        if self.kind == "bilstm":
            f, h = self.in_channels, self.hidden_size
            shapes = {}
            for d in ("fwd", "bwd"):
                shapes[f"w_{d}"] = (f, 4 * h)
                shapes[f"u_{d}"] = (h, 4 * h)
                shapes[f"b_{d}"] = (4 * h,)
            return shapes
        return {}


def init_params(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """He-uniform weights for conv/dense; +-1/sqrt(fan_in) uniform for LSTM
    with forget-gate bias 1. Biases start at zero."""
    params: dict[str, Tensor] = {}
    if spec.kind in ("conv1d", "conv2d", "transposed_conv1d", "transposed_conv2d", "dense"):
        shapes = spec.param_shapes()
        w_shape = shapes["w"]
        if spec.kind == "dense":
            fan_in = spec.in_channels
        elif spec.kind.startswith("transposed"):
            fan_in = spec.in_channels * int(np.prod(w_shape[2:]))
        else:
            fan_in = int(np.prod(w_shape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        params["w"] = Tensor(
            rng.uniform(-limit, limit, size=w_shape).astype(dtype), requires_grad=True
        )
        params["b"] = Tensor(np.zeros(shapes["b"], dtype=dtype), requires_grad=True)
    elif spec.kind == "bilstm":
        f, h = spec.in_channels, spec.hidden_size
        for d in ("fwd", "bwd"):
            params[f"w_{d}"] = Tensor(
                rng.uniform(-1 / np.sqrt(f), 1 / np.sqrt(f), size=(f, 4 * h)).astype(dtype),
                requires_grad=True,
            )
            params[f"u_{d}"] = Tensor(
                rng.uniform(-1 / np.sqrt(h), 1 / np.sqrt(h), size=(h, 4 * h)).astype(dtype),
                requires_grad=True,
            )
            bias = np.zeros(4 * h, dtype=dtype)
            bias[h : 2 * h] = 1.0  # forget gate open at start
            params[f"b_{d}"] = Tensor(bias, requires_grad=True)
    return params


# --- shape algebra ------------------------------------------------------------


def _conv_len(n: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-n // stride)  # ceil
    if n < k:
        raise ShapeMismatch(f"input length {n} below kernel {k} with valid padding")
    return (n - k) // stride + 1


def _pool_len(n: int, k: int, stride: int) -> int:
    if n < k:
        raise ShapeMismatch(f"input length {n} below pool window {k}")
    return (n - k) // stride + 1


def output_shape(spec: LayerSpec, input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Declared output shape for a given input shape (the contract the
    forward implementations must match)."""
    kind = spec.kind
    if kind == "conv1d":
        b, c, n = input_shape
        return (b, spec.out_channels, _conv_len(n, spec.kernel, spec.stride, spec.padding))
    if kind == "conv2d":
        b, c, h, w = input_shape
        kh, kw = (spec.kernel, spec.kernel) if isinstance(spec.kernel, int) else spec.kernel
        return (
            b,
            spec.out_channels,
            _conv_len(h, kh, spec.stride, spec.padding),
            _conv_len(w, kw, spec.stride, spec.padding),
        )
    if kind == "transposed_conv1d":
        b, c, n = input_shape
        return (b, spec.out_channels, (n - 1) * spec.stride + spec.kernel)
    if kind == "transposed_conv2d":
        b, c, h, w = input_shape
        kh, kw = (spec.kernel, spec.kernel) if isinstance(spec.kernel, int) else spec.kernel
        return (b, spec.out_channels, (h - 1) * spec.stride + kh, (w - 1) * spec.stride + kw)
    if kind == "maxpool":
        if len(input_shape) == 3:
            b, c, n = input_shape
            return (b, c, _pool_len(n, spec.kernel, spec.stride))
        b, c, h, w = input_shape
        return (b, c, _pool_len(h, spec.kernel, spec.stride), _pool_len(w, spec.kernel, spec.stride))
    if kind in ("relu", "concat"):
        return tuple(input_shape)
    if kind == "dense":
        b, f = input_shape
        return (b, spec.out_channels)
    if kind == "bilstm":
        b, t, f = input_shape
        return (b, t, 2 * spec.hidden_size)
    if kind == "global_avg_pool":
        return tuple(input_shape[:2])
    if kind == "softmax_xent":
        return ()
    raise ValueError(kind)


# --- convolution / pooling ops ------------------------------------------------


def _pad_amount(n: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    out = -(-n // stride)
    deficit = max((out - 1) * stride + k - n, 0)
    low = deficit // 2
    return low, deficit - low


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    if x.data.ndim != 3:
        raise ShapeMismatch(f"conv1d expects (B, C, L), got {x.data.shape}")
    batch, c_in, n = x.data.shape
    c_out, c_in_w, k = w.data.shape
    if c_in != c_in_w:
        raise ShapeMismatch(f"conv1d input has {c_in} channels, weights expect {c_in_w}")
    lo, hi = _pad_amount(n, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (lo, hi))) if lo or hi else x.data
    n_out = _conv_len(n, k, stride, padding)
    reach = stride * (n_out - 1) + 1
    # strided tap views of w fall off the BLAS fast path; copy them
    taps = [np.ascontiguousarray(w.data[:, :, tap]) for tap in range(k)]
    y = np.zeros((batch, c_out, n_out), dtype=x.data.dtype)
    for tap in range(k):
        y += np.matmul(taps[tap], xp[:, :, tap : tap + reach : stride])
    y += b.data[None, :, None]

    def backward(g):
        db = g.sum(axis=(0, 2))
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        for tap in range(k):
            xs = xp[:, :, tap : tap + reach : stride]
            dw[:, :, tap] = np.tensordot(g, xs, axes=([0, 2], [0, 2]))
            dxp[:, :, tap : tap + reach : stride] += np.matmul(
                np.ascontiguousarray(taps[tap].T), g
            )
        dx = dxp[:, :, lo : lo + n] if (lo or hi) else dxp
        return dx, dw, db

    return Tensor._op(y, (x, w, b), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (B, C, H, W), got {x.data.shape}")
    if stride == 1:
        return _conv2d_unit_stride(x, w, b, padding)
    return _conv2d_strided(x, w, b, stride, padding)


def _conv2d_unit_stride(x: Tensor, w: Tensor, b: Tensor, padding: str) -> Tensor:
    """Stride-1 conv2d over a width-flattened buffer.

    Flattening (H, W) to H*W turns every kernel tap into one contiguous
    slice at offset th*Wp + tw, so each tap is a single batched GEMM with no
    gather copies. Columns in the pad margin are computed and cropped; a
    (kw - 1)-zero tail guard keeps the last tap's slice in bounds.
    """
    batch, c_in, h, wd = x.data.shape
    c_out, c_in_w, kh, kw = w.data.shape
    if c_in != c_in_w:
        raise ShapeMismatch(f"conv2d input has {c_in} channels, weights expect {c_in_w}")
    lo_h, hi_h = _pad_amount(h, kh, 1, padding)
    lo_w, hi_w = _pad_amount(wd, kw, 1, padding)
    h_out = _conv_len(h, kh, 1, padding)
    w_out = _conv_len(wd, kw, 1, padding)
    hp, wp = h + lo_h + hi_h, wd + lo_w + hi_w
    guard = kw - 1
    xf = np.zeros((batch, c_in, hp * wp + guard), dtype=x.data.dtype)
    xf[:, :, : hp * wp].reshape(batch, c_in, hp, wp)[
        :, :, lo_h : lo_h + h, lo_w : lo_w + wd
    ] = x.data
    span = h_out * wp
    taps = {
        (th, tw): np.ascontiguousarray(w.data[:, :, th, tw])
        for th in range(kh)
        for tw in range(kw)
    }
    y_full = np.zeros((batch, c_out, span), dtype=x.data.dtype)
    scratch = np.empty_like(y_full)
    for th in range(kh):
        for tw in range(kw):
            off = th * wp + tw
            np.matmul(taps[th, tw], xf[:, :, off : off + span], out=scratch)
            y_full += scratch
    y = np.ascontiguousarray(y_full.reshape(batch, c_out, h_out, wp)[:, :, :, :w_out])
    y += b.data[None, :, None, None]

    def backward(g):
        db = g.sum(axis=(0, 2, 3))
        g_full = np.zeros((batch, c_out, h_out, wp), dtype=g.dtype)
        g_full[:, :, :, :w_out] = g
        g_full = g_full.reshape(batch, c_out, span)
        dw = np.zeros_like(w.data)
        dxf = np.zeros_like(xf)
        outer = np.empty((batch, c_out, c_in), dtype=g.dtype)
        dx_scratch = np.empty((batch, c_in, span), dtype=g.dtype)
        for th in range(kh):
            for tw in range(kw):
                off = th * wp + tw
                xs = xf[:, :, off : off + span]
                # dW as a batched GEMM against the transposed view keeps BLAS
                # on the fast path; tensordot would copy both operands per tap
                np.matmul(g_full, xs.swapaxes(1, 2), out=outer)
                dw[:, :, th, tw] = outer.sum(axis=0)
                np.matmul(np.ascontiguousarray(taps[th, tw].T), g_full, out=dx_scratch)
                dxf[:, :, off : off + span] += dx_scratch
        dx = dxf[:, :, : hp * wp].reshape(batch, c_in, hp, wp)[
            :, :, lo_h : lo_h + h, lo_w : lo_w + wd
        ]
        return np.ascontiguousarray(dx), dw, db

    return Tensor._op(y, (x, w, b), backward)


def _conv2d_strided(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: str) -> Tensor:
    batch, c_in, h, wd = x.data.shape
    c_out, c_in_w, kh, kw = w.data.shape
    if c_in != c_in_w:
        raise ShapeMismatch(f"conv2d input has {c_in} channels, weights expect {c_in_w}")
    lo_h, hi_h = _pad_amount(h, kh, stride, padding)
    lo_w, hi_w = _pad_amount(wd, kw, stride, padding)
    if lo_h or hi_h or lo_w or hi_w:
        xp = np.pad(x.data, ((0, 0), (0, 0), (lo_h, hi_h), (lo_w, hi_w)))
    else:
        xp = x.data
    h_out = _conv_len(h, kh, stride, padding)
    w_out = _conv_len(wd, kw, stride, padding)
    reach_h = stride * (h_out - 1) + 1
    reach_w = stride * (w_out - 1) + 1
    taps = {
        (th, tw): np.ascontiguousarray(w.data[:, :, th, tw])
        for th in range(kh)
        for tw in range(kw)
    }
    y = np.zeros((batch, c_out, h_out, w_out), dtype=x.data.dtype)
    for th in range(kh):
        for tw in range(kw):
            xs = xp[:, :, th : th + reach_h : stride, tw : tw + reach_w : stride]
            flat = np.ascontiguousarray(xs).reshape(batch, c_in, h_out * w_out)
            y += np.matmul(taps[th, tw], flat).reshape(batch, c_out, h_out, w_out)
    y += b.data[None, :, None, None]

    def backward(g):
        db = g.sum(axis=(0, 2, 3))
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        g_flat = g.reshape(batch, c_out, h_out * w_out)
        for th in range(kh):
            for tw in range(kw):
                xs = xp[:, :, th : th + reach_h : stride, tw : tw + reach_w : stride]
                flat = np.ascontiguousarray(xs).reshape(batch, c_in, h_out * w_out)
                dw[:, :, th, tw] = np.tensordot(g_flat, flat, axes=([0, 2], [0, 2]))
                dxs = np.matmul(np.ascontiguousarray(taps[th, tw].T), g_flat).reshape(
                    batch, c_in, h_out, w_out
                )
                dxp[:, :, th : th + reach_h : stride, tw : tw + reach_w : stride] += dxs
        if lo_h or hi_h or lo_w or hi_w:
            dx = dxp[:, :, lo_h : lo_h + h, lo_w : lo_w + wd]
        else:
            dx = dxp
        return dx, dw, db

    return Tensor._op(y, (x, w, b), backward)


def transposed_conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeMismatch(f"transposed_conv1d expects (B, C, L), got {x.data.shape}")
    batch, c_in, n = x.data.shape
    c_in_w, c_out, k = w.data.shape
    if c_in != c_in_w:
        raise ShapeMismatch(
            f"transposed_conv1d input has {c_in} channels, weights expect {c_in_w}"
        )
    n_out = (n - 1) * stride + k
    reach = stride * (n - 1) + 1
    taps = [np.ascontiguousarray(w.data[:, :, tap]) for tap in range(k)]
    y = np.zeros((batch, c_out, n_out), dtype=x.data.dtype)
    for tap in range(k):
        y[:, :, tap : tap + reach : stride] += np.matmul(
            np.ascontiguousarray(taps[tap].T), x.data
        )
    y += b.data[None, :, None]

    def backward(g):
        db = g.sum(axis=(0, 2))
        dw = np.zeros_like(w.data)
        dx = np.zeros_like(x.data)
        for tap in range(k):
            gs = np.ascontiguousarray(g[:, :, tap : tap + reach : stride])
            dw[:, :, tap] = np.tensordot(x.data, gs, axes=([0, 2], [0, 2]))
            dx += np.matmul(taps[tap], gs)
        return dx, dw, db

    return Tensor._op(y, (x, w, b), backward)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"transposed_conv2d expects (B, C, H, W), got {x.data.shape}")
    batch, c_in, h, wd = x.data.shape
    c_in_w, c_out, kh, kw = w.data.shape
    if c_in != c_in_w:
        raise ShapeMismatch(
            f"transposed_conv2d input has {c_in} channels, weights expect {c_in_w}"
        )
    h_out = (h - 1) * stride + kh
    w_out = (wd - 1) * stride + kw
    reach_h = stride * (h - 1) + 1
    reach_w = stride * (wd - 1) + 1
    x_flat = x.data.reshape(batch, c_in, h * wd)
    taps = {
        (th, tw): np.ascontiguousarray(w.data[:, :, th, tw])
        for th in range(kh)
        for tw in range(kw)
    }
    y = np.zeros((batch, c_out, h_out, w_out), dtype=x.data.dtype)
    for th in range(kh):
        for tw in range(kw):
            proj = np.matmul(np.ascontiguousarray(taps[th, tw].T), x_flat).reshape(
                batch, c_out, h, wd
            )
            y[:, :, th : th + reach_h : stride, tw : tw + reach_w : stride] += proj
    y += b.data[None, :, None, None]

    def backward(g):
        db = g.sum(axis=(0, 2, 3))
        dw = np.zeros_like(w.data)
        dx = np.zeros_like(x.data)
        for th in range(kh):
            for tw in range(kw):
                gs = g[:, :, th : th + reach_h : stride, tw : tw + reach_w : stride]
                gs_flat = np.ascontiguousarray(gs).reshape(batch, c_out, h * wd)
                dw[:, :, th, tw] = np.tensordot(x_flat, gs_flat, axes=([0, 2], [0, 2]))
                dx += np.matmul(taps[th, tw], gs_flat).reshape(batch, c_in, h, wd)
        return dx, dw, db

    return Tensor._op(y, (x, w, b), backward)


def maxpool1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeMismatch(f"maxpool1d expects (B, C, L), got {x.data.shape}")
    batch, c, n = x.data.shape
    n_out = _pool_len(n, kernel, stride)
    reach = stride * (n_out - 1) + 1
    windows = np.stack(
        [x.data[:, :, tap : tap + reach : stride] for tap in range(kernel)], axis=0
    )
    winner = windows.argmax(axis=0)
    y = windows.max(axis=0)

    def backward(g):
        dx = np.zeros_like(x.data)
        for tap in range(kernel):
            dx[:, :, tap : tap + reach : stride] += g * (winner == tap)
        return (dx,)

    return Tensor._op(y, (x,), backward)


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects (B, C, H, W), got {x.data.shape}")
    batch, c, h, wd = x.data.shape
    if kernel == stride and h % kernel == 0 and wd % kernel == 0:
        return _maxpool2d_tiled(x, kernel)
    h_out = _pool_len(h, kernel, stride)
    w_out = _pool_len(wd, kernel, stride)
    reach_h = stride * (h_out - 1) + 1
    reach_w = stride * (w_out - 1) + 1
    windows = np.stack(
        [
            x.data[:, :, th : th + reach_h : stride, tw : tw + reach_w : stride]
            for th in range(kernel)
            for tw in range(kernel)
        ],
        axis=0,
    )
    winner = windows.argmax(axis=0)
    y = windows.max(axis=0)

    def backward(g):
        dx = np.zeros_like(x.data)
        for th in range(kernel):
            for tw in range(kernel):
                tap = th * kernel + tw
                dx[:, :, th : th + reach_h : stride, tw : tw + reach_w : stride] += g * (
                    winner == tap
                )
        return (dx,)

    return Tensor._op(y, (x,), backward)


def _maxpool2d_tiled(x: Tensor, k: int) -> Tensor:
    """Non-overlapping pooling on exactly divisible maps via one reshape."""
    batch, c, h, wd = x.data.shape
    tiles = x.data.reshape(batch, c, h // k, k, wd // k, k)
    tiles = np.ascontiguousarray(tiles.transpose(0, 1, 2, 4, 3, 5)).reshape(
        batch, c, h // k, wd // k, k * k
    )
    winner = tiles.argmax(axis=-1)
    y = np.take_along_axis(tiles, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        dt = np.zeros_like(tiles)
        np.put_along_axis(dt, winner[..., None], g[..., None], axis=-1)
        dt = dt.reshape(batch, c, h // k, wd // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(dt).reshape(batch, c, h, wd),)

    return Tensor._op(np.ascontiguousarray(y), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes, (B, C, ...) -> (B, C)."""
    if x.data.ndim < 3:
        raise ShapeMismatch(f"global_avg_pool expects spatial axes, got {x.data.shape}")
    return mean(x, axis=tuple(range(2, x.data.ndim)))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"dense expects (B, F), got {x.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch(
            f"dense input width {x.data.shape[1]} does not match weights {w.data.shape}"
        )
    return add(matmul(x, w), b)


def _lstm_direction(
    x: Tensor, w: Tensor, u: Tensor, b: Tensor, hidden: int, reverse: bool
) -> list[Tensor]:
    """Hidden states per step (batch, H), in original time order."""
    batch, steps, _ = x.data.shape
    dtype = x.data.dtype
    h = Tensor(np.zeros((batch, hidden), dtype=dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=dtype))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    outputs: dict[int, Tensor] = {}
    for t in order:
        x_t = index(x, (slice(None), t))
        gates = add(add(matmul(x_t, w), matmul(h, u)), b)
        i_g = sigmoid(index(gates, (slice(None), slice(0, hidden))))
        f_g = sigmoid(index(gates, (slice(None), slice(hidden, 2 * hidden))))
        g_g = tanh(index(gates, (slice(None), slice(2 * hidden, 3 * hidden))))
        o_g = sigmoid(index(gates, (slice(None), slice(3 * hidden, 4 * hidden))))
        c = add(mul(f_g, c), mul(i_g, g_g))
        h = mul(o_g, tanh(c))
        outputs[t] = h
    return [outputs[t] for t in range(steps)]


def bilstm(x: Tensor, params: dict[str, Tensor], hidden: int) -> Tensor:
    """(B, T, F) -> (B, T, 2H): forward-direction states then backward states."""
    if x.data.ndim != 3:
        raise ShapeMismatch(f"bilstm expects (B, T, F), got {x.data.shape}")
    fwd = _lstm_direction(x, params["w_fwd"], params["u_fwd"], params["b_fwd"], hidden, False)
    bwd = _lstm_direction(x, params["w_bwd"], params["u_bwd"], params["b_bwd"], hidden, True)
    steps = [concat([f, b], axis=1) for f, b in zip(fwd, bwd)]
    return stack(steps, axis=1)


def forward(spec: LayerSpec, params: dict[str, Tensor], x, labels=None) -> Tensor:
    """Apply one layer. `x` is a Tensor, or a sequence of Tensors for concat;
    softmax_xent additionally needs integer labels."""
    kind = spec.kind
    if kind == "conv1d":
        return conv1d(x, params["w"], params["b"], spec.stride, spec.padding)
    if kind == "conv2d":
        return conv2d(x, params["w"], params["b"], spec.stride, spec.padding)
    if kind == "transposed_conv1d":
        return transposed_conv1d(x, params["w"], params["b"], spec.stride)
    if kind == "transposed_conv2d":
        return transposed_conv2d(x, params["w"], params["b"], spec.stride)
    if kind == "maxpool":
        if x.data.ndim == 3:
            return maxpool1d(x, spec.kernel, spec.stride)
        return maxpool2d(x, spec.kernel, spec.stride)
    if kind == "relu":
        return relu_op(x)
    if kind == "dense":
        return dense(x, params["w"], params["b"])
    if kind == "bilstm":
        return bilstm(x, params, spec.hidden_size)
    if kind == "concat":
        return concat(list(x), spec.axis)
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    if kind == "softmax_xent":
        if labels is None:
            raise ValueError("softmax_xent needs labels")
        return softmax_cross_entropy(x, labels)
    raise ValueError(kind)
