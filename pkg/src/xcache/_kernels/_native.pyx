# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled lane of the hot kernels.

Mirrors ``xcache._kernels.fallback`` function for function. Integer outputs
are bit-identical to the fallback; float outputs follow the same per-element
formulas (the extension is compiled with FP contraction disabled), so only
reduction order can differ, and only inside the Jacobi dot products.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, floor, sqrt
from libc.stdint cimport int64_t, uint8_t, uint64_t

cnp.import_array()


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def seed_state(seed):
    """Expand a 64-bit seed into the 4-word generator state via SplitMix64."""
    cdef uint64_t x = <uint64_t> (seed & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t z
    out = np.empty(4, dtype=np.uint64)
    cdef uint64_t[::1] st = out
    cdef int i
    for i in range(4):
        x = x + <uint64_t> 0x9E3779B97F4A7C15
        z = x
        z = (z ^ (z >> 30)) * <uint64_t> 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * <uint64_t> 0x94D049BB133111EB
        st[i] = z ^ (z >> 31)
    return out


def rng_fill(cnp.ndarray[cnp.uint64_t, ndim=1] state, Py_ssize_t n):
    """Draw ``n`` raw 64-bit values, advancing ``state`` in place."""
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] res = out
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3]
    cdef uint64_t t, tmp
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            tmp = s0 + s3
            res[i] = _rotl(tmp, 23) + s0
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return out


def pack_codes(cnp.ndarray[cnp.uint8_t, ndim=1] codes, int bits):
    """Pack ``bits``-wide codes into a little-endian stream of 64-bit words."""
    cdef Py_ssize_t n = codes.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.uint64)
    cdef Py_ssize_t n_words = (n * bits + 63) // 64
    out = np.zeros(n_words, dtype=np.uint64)
    cdef uint64_t[::1] words = out
    cdef const uint8_t[::1] c = codes
    cdef Py_ssize_t i
    cdef uint64_t off, code
    cdef int w, s
    with nogil:
        for i in range(n):
            off = <uint64_t> i * <uint64_t> bits
            w = <int> (off >> 6)
            s = <int> (off & 63)
            code = <uint64_t> c[i]
            words[w] |= code << s
            if s + bits > 64:
                words[w + 1] |= code >> (64 - s)
    return out


def unpack_codes(cnp.ndarray[cnp.uint64_t, ndim=1] words, int bits, Py_ssize_t n):
    """Inverse of :func:`pack_codes`; returns ``n`` codes as uint8."""
    out = np.zeros(n, dtype=np.uint8)
    if n == 0:
        return out
    cdef uint8_t[::1] res = out
    cdef const uint64_t[::1] wv = words
    cdef uint64_t mask = (<uint64_t> 1 << bits) - 1
    cdef Py_ssize_t i
    cdef uint64_t off, val
    cdef int w, s
    with nogil:
        for i in range(n):
            off = <uint64_t> i * <uint64_t> bits
            w = <int> (off >> 6)
            s = <int> (off & 63)
            val = wv[w] >> s
            if s + bits > 64:
                val |= wv[w + 1] << (64 - s)
            res[i] = <uint8_t> (val & mask)
    return out


def quantize_groups(cnp.ndarray[cnp.float64_t, ndim=2] x, int group_size, int bits):
    """Quantize each row of ``x`` in contiguous groups of ``group_size``."""
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t n_groups = (cols + group_size - 1) // group_size
    codes_arr = np.empty((rows, cols), dtype=np.uint8)
    scales_arr = np.empty((rows, n_groups), dtype=np.float64)
    zps_arr = np.empty((rows, n_groups), dtype=np.float64)
    cdef uint8_t[:, ::1] codes = codes_arr
    cdef double[:, ::1] scales = scales_arr
    cdef double[:, ::1] zps = zps_arr
    cdef const double[:, ::1] xv = x
    cdef double qmax = <double> ((1 << bits) - 1)
    cdef Py_ssize_t r, g, j, lo, hi
    cdef double mn, mx, scale, v, q
    with nogil:
        for r in range(rows):
            for g in range(n_groups):
                lo = g * group_size
                hi = lo + group_size
                if hi > cols:
                    hi = cols
                mn = xv[r, lo]
                mx = xv[r, lo]
                for j in range(lo + 1, hi):
                    if xv[r, j] < mn:
                        mn = xv[r, j]
                    if xv[r, j] > mx:
                        mx = xv[r, j]
                if mx - mn == 0.0:
                    scale = 1.0
                else:
                    scale = (mx - mn) / qmax
                scales[r, g] = scale
                zps[r, g] = mn
                for j in range(lo, hi):
                    v = (xv[r, j] - mn) / scale
                    q = floor(v + 0.5)
                    if q < 0.0:
                        q = 0.0
                    elif q > qmax:
                        q = qmax
                    codes[r, j] = <uint8_t> q
    return codes_arr, scales_arr, zps_arr


def dequantize_groups(
    cnp.ndarray[cnp.uint8_t, ndim=2] codes,
    cnp.ndarray[cnp.float64_t, ndim=2] scales,
    cnp.ndarray[cnp.float64_t, ndim=2] zero_points,
    int group_size,
):
    """Reconstruct ``code * scale + zero_point`` in float64."""
    cdef Py_ssize_t rows = codes.shape[0], cols = codes.shape[1]
    out = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef const uint8_t[:, ::1] cv = codes
    cdef const double[:, ::1] sv = scales
    cdef const double[:, ::1] zv = zero_points
    cdef Py_ssize_t r, j
    cdef double s, z
    with nogil:
        for r in range(rows):
            for j in range(cols):
                s = sv[r, j / group_size]
                z = zv[r, j / group_size]
                res[r, j] = (<double> cv[r, j]) * s + z
    return out


def jacobi_sweep(
    cnp.ndarray[cnp.float64_t, ndim=2] acols,
    cnp.ndarray[cnp.float64_t, ndim=2] vcols,
    double eps,
):
    """One sweep of right-hand Jacobi rotations; see the fallback docstring."""
    cdef Py_ssize_t n = acols.shape[0], m = acols.shape[1]
    cdef double[:, ::1] av = acols
    cdef double[:, ::1] vv = vcols
    cdef double worst = 0.0
    cdef Py_ssize_t p, q, i
    cdef double alpha, beta, gamma, ratio, zeta, t, c, s, xp, xq
    with nogil:
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += av[p, i] * av[p, i]
                    beta += av[q, i] * av[q, i]
                    gamma += av[p, i] * av[q, i]
                if alpha == 0.0 or beta == 0.0 or gamma == 0.0:
                    continue
                ratio = fabs(gamma) / sqrt(alpha * beta)
                if ratio > worst:
                    worst = ratio
                if ratio <= eps:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    xp = av[p, i]
                    xq = av[q, i]
                    av[p, i] = c * xp - s * xq
                    av[q, i] = s * xp + c * xq
                for i in range(n):
                    xp = vv[p, i]
                    xq = vv[q, i]
                    vv[p, i] = c * xp - s * xq
                    vv[q, i] = s * xp + c * xq
    return worst
