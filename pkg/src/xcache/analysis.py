"""Latent-distribution statistics and calibration-free outlier-channel
prediction for the Keys.

The prediction reads only the weights: the candidate outlier channels of
the (pre-rotation) Keys are the columns holding the largest-magnitude
entries of the first row of the K projection's right singular factor. The
constructors below build instances where the mechanism provably holds, and
instances deliberately shaped so the top-1 prediction fails (a second
singular direction amplified onto a single output channel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from xcache.errors import ConfigError, DataError, ShapeError
from xcache.linalg import RngState, SvdFactors


@dataclass
class ChannelStats:
    """Mean absolute magnitude per channel; argmax ties break low."""

    mean_abs: np.ndarray
    argmax: int


@dataclass
class OutlierPrediction:
    indices: list[int]
    k: int


def latent_stats(x: np.ndarray, u: np.ndarray) -> ChannelStats:
    """Per-channel statistics of the projected activations ``x @ u``."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.ndim != 2 or u.ndim != 2 or x.shape[1] != u.shape[0]:
        raise ShapeError(
            f"cannot project {getattr(x, 'shape', None)} by {getattr(u, 'shape', None)}"
        )
    lat = x @ u
    if lat.shape[0] == 0:
        mean_abs = np.zeros(lat.shape[1])
    else:
        mean_abs = np.mean(np.abs(lat), axis=0)
    return ChannelStats(mean_abs=mean_abs, argmax=int(np.argmax(mean_abs)))


def ground_truth_channel(x: np.ndarray, w_k: np.ndarray) -> int:
    """Index of the largest-average-magnitude channel of the pre-rotation Keys."""
    keys = np.asarray(x, dtype=np.float64) @ np.asarray(w_k, dtype=np.float64)
    return int(np.argmax(np.mean(np.abs(keys), axis=0)))


def predict_outlier_channels(svd_k: SvdFactors, k: int) -> OutlierPrediction:
    """Top-``k`` key outlier channels read off the weights alone.

    Candidates are ordered by descending magnitude of the first row of the
    right factor, ties broken toward the lower index.
    """
    row = np.abs(svd_k.b_t[0])
    if k < 0 or k > row.shape[0]:
        raise ConfigError(f"k must be in [0, {row.shape[0]}], got {k}")
    order = np.argsort(-row, kind="stable")
    return OutlierPrediction(indices=[int(i) for i in order[:k]], k=k)


def evaluate_prediction(model, data: list[np.ndarray], k: int) -> float:
    """Fraction of layers whose true Key outlier channel is in the top-k
    prediction. ``data`` supplies one activation matrix per layer."""
    if len(data) == 0:
        raise DataError("no layer activations supplied")
    if len(data) != len(model.layers):
        raise ShapeError(
            f"{len(data)} activation matrices for {len(model.layers)} layers"
        )
    hits = 0
    for lw, x in zip(model.layers, data):
        pred = predict_outlier_channels(lw.svd_k, k)
        if ground_truth_channel(x, lw.w_k) in pred.indices:
            hits += 1
    return hits / len(data)


# ---------------------------------------------------------------------------
# Constructed instances (the mechanism at desk scale)
# ---------------------------------------------------------------------------


def _orthonormal_columns(rng: RngState, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normals(rows * cols).reshape(rows, cols))
    # Fix signs so the construction is independent of the QR convention.
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def _basis_with_first_row(first: np.ndarray, rng: RngState) -> np.ndarray:
    """Orthonormal row basis whose first row is ``first`` (unit norm)."""
    r = first.shape[0]
    m = np.empty((r, r))
    m[:, 0] = first
    m[:, 1:] = rng.normals(r * (r - 1)).reshape(r, r - 1)
    q, _ = np.linalg.qr(m)
    b_t = q.T
    if b_t[0] @ first < 0:
        b_t[0] = -b_t[0]
    # Re-orthogonalized first row equals ``first`` up to rounding.
    b_t[0] = first
    return b_t


def make_dominant_instance(
    seed: int, n_tokens: int = 64, hidden_dim: int = 48, latent_width: int = 16
) -> tuple[np.ndarray, np.ndarray, int]:
    """A (w_k, x) pair where the top-1 prediction provably succeeds.

    The activations lie along the leading left singular direction, and the
    right factor's first row has one clearly dominant entry, so that entry's
    column is the Key outlier channel. Returns ``(w_k, x, expected_channel)``.
    """
    rng = RngState(seed)
    target = int(rng.next_uint64(1)[0] % latent_width)
    u = _orthonormal_columns(rng, hidden_dim, latent_width)
    first = 0.05 * rng.normals(latent_width)
    first[target] = 1.0
    first /= np.linalg.norm(first)
    b_t = _basis_with_first_row(first, rng)
    sigma = 1.0 * 0.5 ** np.arange(latent_width)
    w_k = u @ (sigma[:, None] * b_t)
    alphas = rng.normals(n_tokens)
    x = np.outer(alphas, u[:, 0]) + 0.02 * rng.normals(
        n_tokens * hidden_dim
    ).reshape(n_tokens, hidden_dim)
    return w_k, x, target


def make_failure_instance(
    seed: int, n_tokens: int = 64, hidden_dim: int = 48, latent_width: int = 16
) -> tuple[np.ndarray, np.ndarray, int]:
    """A (w_k, x) pair where the top-1 prediction provably fails.

    The first row of the right factor is spread thin while the second row
    concentrates on one channel; the activations carry enough of the second
    singular direction that its channel wins in the Keys even though the
    first latent channel still has the largest magnitude.
    Returns ``(w_k, x, true_channel)`` with ``true_channel`` never equal to
    the top-1 prediction.
    """
    rng = RngState(seed)
    concentrated = int(rng.next_uint64(1)[0] % latent_width)
    spread = 1.0 + 0.2 * np.abs(rng.normals(latent_width))
    spread[concentrated] = 0.0
    spread /= np.linalg.norm(spread)
    m = np.empty((latent_width, latent_width))
    m[:, 0] = spread
    m[:, 1] = 0.0
    m[concentrated, 1] = 1.0
    m[:, 2:] = rng.normals(latent_width * (latent_width - 2)).reshape(
        latent_width, latent_width - 2
    )
    q, _ = np.linalg.qr(m)
    b_t = q.T
    b_t[0] = spread
    b_t[1] = 0.0
    b_t[1, concentrated] = 1.0
    u = _orthonormal_columns(rng, hidden_dim, latent_width)
    sigma = np.concatenate(([1.0, 0.9], 0.4 * 0.5 ** np.arange(latent_width - 2)))
    w_k = u @ (sigma[:, None] * b_t)
    alphas = np.abs(rng.normals(n_tokens)) + 0.5
    betas = 0.8 * alphas
    x = (
        np.outer(alphas, u[:, 0])
        + np.outer(betas, u[:, 1])
        + 0.01 * rng.normals(n_tokens * hidden_dim).reshape(n_tokens, hidden_dim)
    )
    return w_k, x, concentrated
