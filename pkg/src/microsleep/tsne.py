"""Exact t-SNE with cosine input distances.

Maps flattened spectrograms (or raw epochs) to 2-D coordinates for the
distribution analysis comparing night-sleep stages with driving micro-sleep.
Affinities use the classic Gaussian-kernel construction with a per-point
bandwidth found by binary search on the conditional entropy; the embedding
is optimized by momentum gradient descent on KL(P || Q) with early
exaggeration. Everything is O(N^2) and intended for desk-scale N.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

DEFAULT_PERPLEXITY = 30.0
DEFAULT_ITERS = 1000
DEFAULT_LR = 200.0
EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
ENTROPY_TOL = 1e-4
MAX_SEARCH_STEPS = 50


class EmbedError(Exception):
    pass


class ZeroVector(EmbedError):
    pass


class CalibrationFailure(EmbedError):
    pass


class NumericalDivergence(EmbedError):
    pass


@dataclass
class AffinityMatrix:
    """Symmetric joint probabilities P with the bandwidths that produced them."""

    P: np.ndarray
    perplexity: float
    sigmas: np.ndarray


@dataclass
class Embedding:
    Y: np.ndarray
    final_kl: float
    iterations: int
    kl_trace: np.ndarray


def cosine_distances(items: np.ndarray) -> np.ndarray:
    """Pairwise d(a, b) = 1 - <a, b> / (|a| |b|), symmetric with zero diagonal."""
    X = np.asarray(items, dtype=np.float64)
    if X.ndim != 2:
        raise EmbedError(f"items must be a 2-D array, got shape {X.shape}")
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroVector(f"cosine distance undefined for zero vector at index {zero[0]}")
    unit = X / norms[:, None]
    D = 1.0 - unit @ unit.T
    np.clip(D, 0.0, 2.0, out=D)
    D = (D + D.T) / 2
    np.fill_diagonal(D, 0.0)
    return D


def _row_affinities(d_row: np.ndarray, i: int, beta: float) -> tuple[np.ndarray, float]:
    """Conditional probabilities and their entropy (bits) for precision beta."""
    p = np.exp(-(d_row**2) * beta)
    p[i] = 0.0
    total = p.sum()
    if total <= 0.0:
        return p, 0.0
    p /= total
    nz = p[p > 0]
    entropy = float(-(nz * np.log2(nz)).sum())
    return p, entropy


def conditional_entropy(D: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Recompute per-row conditional entropy (bits) from stored bandwidths."""
    out = np.empty(len(D))
    for i in range(len(D)):
        beta = 1.0 / (2.0 * sigmas[i] ** 2)
        _, out[i] = _row_affinities(D[i], i, beta)
    return out


def calibrate_affinities(
    D: np.ndarray, perplexity: float = DEFAULT_PERPLEXITY
) -> AffinityMatrix:
    """Binary-search each row's bandwidth to the target entropy, then symmetrize.

    Raises CalibrationFailure when a row cannot reach log2(perplexity) within
    the step budget, rather than silently clamping.
    """
    D = np.asarray(D, dtype=np.float64)
    n = len(D)
    if not 0 < perplexity < n:
        raise CalibrationFailure(f"perplexity {perplexity} must be in (0, {n})")
    target = np.log2(perplexity)
    P_cond = np.zeros((n, n))
    sigmas = np.empty(n)
    for i in range(n):
        beta, lo, hi = 1.0, 0.0, np.inf
        p, entropy = _row_affinities(D[i], i, beta)
        steps = 0
        while abs(entropy - target) > ENTROPY_TOL:
            steps += 1
            if steps > MAX_SEARCH_STEPS:
                raise CalibrationFailure(
                    f"row {i}: entropy {entropy:.6f} bits never reached target "
                    f"{target:.6f} within {MAX_SEARCH_STEPS} steps"
                )
            if entropy > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (lo + beta) / 2
            p, entropy = _row_affinities(D[i], i, beta)
        P_cond[i] = p
        sigmas[i] = 1.0 / np.sqrt(2.0 * beta)
    P = (P_cond + P_cond.T) / (2.0 * n)
    return AffinityMatrix(P=P, perplexity=perplexity, sigmas=sigmas)


def _q_matrix(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Student-t affinities Q and the unnormalized kernel (1 + d^2)^-1."""
    sq = np.sum(Y**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T)
    np.maximum(d2, 0.0, out=d2)
    kernel = 1.0 / (1.0 + d2)
    np.fill_diagonal(kernel, 0.0)
    Q = kernel / kernel.sum()
    return Q, kernel


def _kl_from_q(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    """KL(P || Q(Y)) over off-diagonal pairs."""
    Q, _ = _q_matrix(Y)
    return _kl_from_q(P, Q)


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Analytic gradient 4 sum_j (p_ij - q_ij)(y_i - y_j) / (1 + |y_i - y_j|^2)."""
    Q, kernel = _q_matrix(Y)
    W = (P - Q) * kernel
    return 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)


def optimize_embedding(
    affinities: AffinityMatrix,
    iters: int = DEFAULT_ITERS,
    lr: float = DEFAULT_LR,
    seed: int = 0,
) -> Embedding:
    """Momentum gradient descent on KL(P || Q) with early exaggeration.

    The KL trace holds iters + 1 entries, from initialization through the
    final coordinates, always measured against the true (unexaggerated) P so
    values are comparable across the exaggeration switch.
    """
    P = affinities.P
    n = len(P)
    if n < 2:
        raise EmbedError("need at least two points to embed")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    Y = 1e-4 * rng.standard_normal((n, 2))
    velocity = np.zeros_like(Y)
    trace = np.empty(iters + 1)
    for it in range(iters):
        Q, kernel = _q_matrix(Y)
        trace[it] = _kl_from_q(P, Q)
        exaggeration = EXAGGERATION if it < EXAGGERATION_ITERS else 1.0
        W = (exaggeration * P - Q) * kernel
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
        momentum = MOMENTUM_EARLY if it < EXAGGERATION_ITERS else MOMENTUM_LATE
        velocity = momentum * velocity - lr * grad
        Y = Y + velocity
        if not np.all(np.isfinite(Y)):
            raise NumericalDivergence(f"non-finite coordinates at iteration {it}")
    trace[iters] = kl_divergence(P, Y)
    return Embedding(
        Y=Y, final_kl=float(trace[-1]), iterations=iters, kl_trace=trace
    )


def embed_features(
    features: np.ndarray,
    perplexity: float = DEFAULT_PERPLEXITY,
    iters: int = DEFAULT_ITERS,
    lr: float = DEFAULT_LR,
    seed: int = 0,
) -> Embedding:
    """Cosine distances -> calibrated affinities -> optimized 2-D embedding."""
    D = cosine_distances(features)
    affinities = calibrate_affinities(D, perplexity)
    return optimize_embedding(affinities, iters=iters, lr=lr, seed=seed)


def embedding_csv(
    embedding: Embedding, labels: list[str], subject_ids: list[str]
) -> str:
    """Scatter CSV `subject_id,label,y1,y2`, one row per embedded point."""
    n = len(embedding.Y)
    if len(labels) != n or len(subject_ids) != n:
        raise EmbedError(
            f"labels ({len(labels)}) and subjects ({len(subject_ids)}) "
            f"must match {n} embedded points"
        )
    buf = io.StringIO()
    buf.write("subject_id,label,y1,y2\n")
    for sid, label, (y1, y2) in zip(subject_ids, labels, embedding.Y):
        buf.write(f"{sid},{label},{y1:.10g},{y2:.10g}\n")
    return buf.getvalue()
