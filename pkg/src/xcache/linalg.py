"""Dense numerical kernels: matmul, RMS normalization, rotary embedding,
thin SVD, and deterministic weight generation.

A "matrix" throughout the package is a plain 2-D float64 ``numpy.ndarray``.
All public operations return finite arrays and raise on shape mismatches
rather than broadcasting silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from xcache import _kernels
from xcache.errors import ConfigError, NumericalError, ShapeError

ROPE_THETA = 10000.0

# One-sided Jacobi stopping rule: normalized off-diagonals below this after a
# full sweep.
SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60


def _as_matrix(a, name: str = "operand") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain matrix product in float64 with explicit shape checking."""
    a = _as_matrix(a, "left operand")
    b = _as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def rms_norm(x: np.ndarray, gamma: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Scale each row to ``row * gamma / sqrt(mean(row**2) + eps)``."""
    x = _as_matrix(x, "input")
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if gamma.shape[0] != x.shape[1]:
        raise ShapeError(
            f"gain length {gamma.shape[0]} != column count {x.shape[1]}"
        )
    if eps < 0:
        raise ConfigError("eps must be non-negative")
    ms = np.mean(x * x, axis=1, keepdims=True)
    return x / np.sqrt(ms + eps) * gamma


def apply_rope(
    m: np.ndarray,
    positions: np.ndarray,
    head_dim: int,
    theta_base: float = ROPE_THETA,
) -> np.ndarray:
    """Rotary embedding: rotate pair ``(2j, 2j+1)`` of every head by
    ``pos * theta_base**(-2j/head_dim)``.

    ``m`` has one row per position; its column count must be a multiple of
    ``head_dim``, which must be even.
    """
    m = _as_matrix(m, "input")
    if head_dim % 2 != 0:
        raise ConfigError(f"head_dim must be even, got {head_dim}")
    if m.shape[1] % head_dim != 0:
        raise ShapeError(
            f"column count {m.shape[1]} not divisible by head_dim {head_dim}"
        )
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    if positions.shape[0] != m.shape[0]:
        raise ShapeError(
            f"got {positions.shape[0]} positions for {m.shape[0]} rows"
        )
    n_rows, n_cols = m.shape
    n_heads = n_cols // head_dim
    half = head_dim // 2
    freqs = theta_base ** (-2.0 * np.arange(half) / head_dim)
    angles = positions[:, None] * freqs[None, :]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    pairs = m.reshape(n_rows, n_heads, half, 2)
    even = pairs[..., 0]
    odd = pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(n_rows, n_cols)


# ---------------------------------------------------------------------------
# Thin SVD (one-sided Jacobi)
# ---------------------------------------------------------------------------


@dataclass
class SvdFactors:
    """Thin SVD ``w = u @ diag(sigma) @ b_t`` of a tall matrix.

    ``u`` is m x r with orthonormal columns, ``sigma`` descending and
    non-negative, ``b_t`` r x n with orthonormal rows, and ``fused`` the
    precomputed ``diag(sigma) @ b_t`` used as a single rematerialization
    weight.
    """

    u: np.ndarray
    sigma: np.ndarray
    b_t: np.ndarray
    fused: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.fused is None:
            self.fused = self.sigma[:, None] * self.b_t


def fuse_sigma_bt(factors: SvdFactors) -> np.ndarray:
    """Merge the singular values into the right factor; stored on ``factors``."""
    factors.fused = factors.sigma[:, None] * factors.b_t
    return factors.fused


def svd_thin(w: np.ndarray, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS) -> SvdFactors:
    """One-sided Jacobi SVD of a tall matrix (rows >= cols).

    Columns of the working copy are rotated pairwise until every normalized
    off-diagonal of the implicit Gram matrix is at or below ``tol``. The
    returned factors are deterministic: singular values sorted descending
    with ties keeping sweep order, and each column of ``u`` signed so its
    largest-magnitude entry (lowest index on ties) is positive.
    """
    w = _as_matrix(w, "input")
    m, n = w.shape
    if m < n:
        raise ShapeError(f"expected a tall matrix, got {m}x{n}")

    acols = np.ascontiguousarray(w.T)  # columns stored as rows
    vcols = np.eye(n)
    worst = 0.0
    for _ in range(max_sweeps):
        worst = _kernels.jacobi_sweep(acols, vcols, tol)
        if worst <= tol:
            break
    else:
        raise NumericalError(
            f"SVD did not converge in {max_sweeps} sweeps "
            f"(residual off-diagonal ratio {worst:.3e})"
        )

    sigma = np.sqrt(np.sum(acols * acols, axis=1))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    acols = acols[order]
    b_t = vcols[order]

    u = np.zeros((m, n))
    rank_floor = sigma[0] * n * np.finfo(np.float64).eps if sigma[0] > 0 else 0.0
    for j in range(n):
        if sigma[j] > rank_floor:
            u[:, j] = acols[j] / sigma[j]
        else:
            sigma[j] = 0.0
            u[:, j] = _complete_column(u, j, m)

    # Sign convention keeps golden outputs stable across runs.
    for j in range(n):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            b_t[j] = -b_t[j]

    return SvdFactors(u=u, sigma=sigma, b_t=b_t)


def _complete_column(u: np.ndarray, j: int, m: int) -> np.ndarray:
    # Deterministic orthonormal completion for a zero singular direction:
    # Gram-Schmidt a canonical basis vector against the existing columns.
    for k in range(m):
        cand = np.zeros(m)
        cand[(j + k) % m] = 1.0
        for i in range(u.shape[1]):
            col = u[:, i]
            cand -= (col @ cand) * col
        norm = np.linalg.norm(cand)
        if norm > 0.5:
            return cand / norm
    raise NumericalError("could not complete an orthonormal basis")


# ---------------------------------------------------------------------------
# Deterministic weight generation
# ---------------------------------------------------------------------------


class RngState:
    """xoshiro256++ generator seeded through SplitMix64.

    The raw 64-bit stream is integer-exact, so identical seeds reproduce
    identical weight streams run to run. Single-owner: not safe to share
    across threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.state = _kernels.seed_state(self.seed)

    def next_uint64(self, n: int) -> np.ndarray:
        return _kernels.rng_fill(self.state, n)

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard Gaussians via Box-Muller over the raw stream."""
        pairs = (n + 1) // 2
        raw = self.next_uint64(2 * pairs)
        # u1 in (0, 1], u2 in [0, 1): 53-bit mantissas from the top bits.
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]


def gen_weights(rng: RngState, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
    """I.i.d. Gaussian matrix with entry std ``scale / sqrt(cols)``."""
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    z = rng.normals(rows * cols).reshape(rows, cols)
    return z * (scale / np.sqrt(cols))
