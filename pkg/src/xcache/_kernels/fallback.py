"""NumPy lane of the hot kernels.

This module is the import-time fallback used when the compiled extension
(``xcache._kernels._native``) is unavailable. The two lanes implement the
same arithmetic step for step: integer results (packed words, codes, RNG
draws) are bit-identical, and float results agree except where summation
order differs (the Jacobi dot products).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Deterministic RNG (xoshiro256++, SplitMix64 seeding)
# ---------------------------------------------------------------------------


def seed_state(seed: int) -> np.ndarray:
    """Expand a 64-bit seed into the 4-word generator state via SplitMix64."""
    x = seed & _MASK64
    state = np.empty(4, dtype=np.uint64)
    for i in range(4):
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        state[i] = z ^ (z >> 31)
    return state


def rng_fill(state: np.ndarray, n: int) -> np.ndarray:
    """Draw ``n`` raw 64-bit values, advancing ``state`` in place."""
    out = np.empty(n, dtype=np.uint64)
    s0, s1, s2, s3 = (int(v) for v in state)
    for i in range(n):
        tmp = (s0 + s3) & _MASK64
        out[i] = (((tmp << 23) | (tmp >> 41)) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return out


# ---------------------------------------------------------------------------
# Bit packing (little-endian bit stream across 64-bit words)
# ---------------------------------------------------------------------------


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack ``bits``-wide codes into a little-endian stream of 64-bit words.

    Element ``i`` occupies stream bits ``[i*bits, (i+1)*bits)``; bit ``k`` of
    the stream lives at position ``k & 63`` of word ``k >> 6``.
    """
    n = int(codes.shape[0])
    if n == 0:
        return np.zeros(0, dtype=np.uint64)
    n_words = (n * bits + 63) // 64
    words = np.zeros(n_words, dtype=np.uint64)
    offs = np.arange(n, dtype=np.uint64) * np.uint64(bits)
    w = (offs >> np.uint64(6)).astype(np.int64)
    s = offs & np.uint64(63)
    c = codes.astype(np.uint64)
    np.bitwise_or.at(words, w, c << s)
    spill = (s.astype(np.int64) + bits) > 64
    if spill.any():
        np.bitwise_or.at(
            words, w[spill] + 1, c[spill] >> (np.uint64(64) - s[spill])
        )
    return words


def unpack_codes(words: np.ndarray, bits: int, n: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns ``n`` codes as uint8."""
    if n == 0:
        return np.zeros(0, dtype=np.uint8)
    offs = np.arange(n, dtype=np.uint64) * np.uint64(bits)
    w = (offs >> np.uint64(6)).astype(np.int64)
    s = offs & np.uint64(63)
    vals = words[w] >> s
    spill = (s.astype(np.int64) + bits) > 64
    if spill.any():
        vals[spill] |= words[w[spill] + 1] << (np.uint64(64) - s[spill])
    mask = np.uint64((1 << bits) - 1)
    return (vals & mask).astype(np.uint8)


# ---------------------------------------------------------------------------
# Grouped asymmetric uniform quantization
# ---------------------------------------------------------------------------


def _group_edges(length: int, group_size: int) -> tuple[np.ndarray, np.ndarray]:
    starts = np.arange(0, length, group_size)
    reps = np.diff(np.append(starts, length))
    return starts, reps


def quantize_groups(
    x: np.ndarray, group_size: int, bits: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize each row of ``x`` in contiguous groups of ``group_size``.

    Per group: ``scale = (max - min) / (2**bits - 1)``, ``zero_point = min``,
    ``code = clamp(floor((v - min)/scale + 0.5), 0, 2**bits - 1)``. A
    degenerate group (max == min) gets scale 1 and all-zero codes.

    Returns ``(codes, scales, zero_points)`` with codes shaped like ``x``
    (uint8) and the group grids shaped ``(rows, ceil(cols/group_size))``.
    """
    rows, cols = x.shape
    starts, reps = _group_edges(cols, group_size)
    mins = np.minimum.reduceat(x, starts, axis=1)
    maxs = np.maximum.reduceat(x, starts, axis=1)
    qmax = float(2**bits - 1)
    spans = maxs - mins
    with np.errstate(invalid="ignore"):
        scales = np.where(spans == 0.0, 1.0, spans / qmax)
    v = (x - np.repeat(mins, reps, axis=1)) / np.repeat(scales, reps, axis=1)
    q = np.floor(v + 0.5)
    np.clip(q, 0.0, qmax, out=q)
    return q.astype(np.uint8), scales, mins.copy()


def dequantize_groups(
    codes: np.ndarray,
    scales: np.ndarray,
    zero_points: np.ndarray,
    group_size: int,
) -> np.ndarray:
    """Reconstruct ``code * scale + zero_point`` in float64."""
    _, cols = codes.shape
    _, reps = _group_edges(cols, group_size)
    return (
        codes.astype(np.float64) * np.repeat(scales, reps, axis=1)
        + np.repeat(zero_points, reps, axis=1)
    )


# ---------------------------------------------------------------------------
# One-sided Jacobi sweep
# ---------------------------------------------------------------------------


def jacobi_sweep(acols: np.ndarray, vcols: np.ndarray, eps: float) -> float:
    """Run one sweep of right-hand Jacobi rotations over all column pairs.

    ``acols``/``vcols`` hold the working matrix and rotation accumulator
    with columns stored as rows (shape ``(n, m)`` / ``(n, n)``); both are
    updated in place. Pairs whose normalized off-diagonal ``|a_p . a_q| /
    sqrt((a_p . a_p)(a_q . a_q))`` exceeds ``eps`` are rotated. Returns the
    largest such ratio observed before rotation.
    """
    n = acols.shape[0]
    worst = 0.0
    for p in range(n - 1):
        for q in range(p + 1, n):
            ap = acols[p]
            aq = acols[q]
            alpha = float(ap @ ap)
            beta = float(aq @ aq)
            gamma = float(ap @ aq)
            if alpha == 0.0 or beta == 0.0 or gamma == 0.0:
                continue
            ratio = abs(gamma) / np.sqrt(alpha * beta)
            if ratio > worst:
                worst = ratio
            if ratio <= eps:
                continue
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            new_p = c * ap - s * aq
            new_q = s * ap + c * aq
            acols[p] = new_p
            acols[q] = new_q
            vp = vcols[p].copy()
            vq = vcols[q]
            vcols[p] = c * vp - s * vq
            vcols[q] = s * vp + c * vq
    return worst
