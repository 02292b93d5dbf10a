"""Grouped asymmetric uniform quantization with per-token / per-channel axes.

Groups of ``group_size`` consecutive values along the quantization axis share
one (scale, zero_point) pair:

* ``PER_TOKEN``: groups run along the channel dimension inside each row.
* ``PER_CHANNEL``: groups run along the token dimension inside each column.

Codes are held unpacked (one uint8 per element) in memory; the ``bits``-wide
little-endian packing is applied by the binary dump format and exposed here
as :func:`pack_codes` / :func:`unpack_codes`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from xcache import _kernels
from xcache.errors import ConfigError, DataError, FormatError, ShapeError

VALID_BITS = (2, 3, 4, 8, 16)
PASSTHROUGH_BITS = 16

pack_codes = _kernels.pack_codes
unpack_codes = _kernels.unpack_codes


class Axis(IntEnum):
    PER_TOKEN = 0
    PER_CHANNEL = 1


@dataclass(frozen=True)
class QuantConfig:
    """Bit width, grouping axis, and metadata cost of one quantizer."""

    bits: int
    axis: Axis = Axis.PER_TOKEN
    group_size: int = 128
    scale_bits: int = 16
    zp_bits: int = 16

    def __post_init__(self):
        if self.bits not in VALID_BITS:
            raise ConfigError(f"bits must be one of {VALID_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")

    @property
    def passthrough(self) -> bool:
        return self.bits == PASSTHROUGH_BITS


def bits_per_element(cfg: QuantConfig) -> float:
    """Storage cost per element including the per-group scale/zero-point."""
    if cfg.passthrough:
        return 16.0
    return cfg.bits + (cfg.scale_bits + cfg.zp_bits) / cfg.group_size


def _n_groups(length: int, group_size: int) -> int:
    return -(-length // group_size)


@dataclass
class QuantizedTensor:
    """Quantized matrix: uint8 codes plus per-group scale/zero-point grids.

    For ``PER_TOKEN`` the grids are shaped ``(rows, ceil(cols/group_size))``,
    for ``PER_CHANNEL`` ``(ceil(rows/group_size), cols)``. A pass-through
    tensor (bits=16) stores the raw float64 payload in ``data`` instead.
    """

    config: QuantConfig
    rows: int
    cols: int
    codes: np.ndarray | None = None
    scales: np.ndarray | None = None
    zero_points: np.ndarray | None = None
    data: np.ndarray | None = None

    @classmethod
    def empty(cls, cfg: QuantConfig, cols: int) -> "QuantizedTensor":
        if cfg.passthrough:
            return cls(cfg, 0, cols, data=np.zeros((0, cols)))
        if cfg.axis == Axis.PER_TOKEN:
            grid = (0, _n_groups(cols, cfg.group_size))
        else:
            grid = (0, cols)
        return cls(
            cfg,
            0,
            cols,
            codes=np.zeros((0, cols), dtype=np.uint8),
            scales=np.zeros(grid),
            zero_points=np.zeros(grid),
        )


def quantize(t: np.ndarray, cfg: QuantConfig) -> QuantizedTensor:
    """Quantize a matrix in one shot.

    Per group: ``scale = (max - min) / (2**bits - 1)``, ``zero_point = min``,
    codes rounded half away from zero and clamped. Degenerate groups
    (max == min) store scale 1 and all-zero codes, reconstructing exactly.
    """
    t = np.ascontiguousarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={t.ndim}")
    if not np.all(np.isfinite(t)):
        raise DataError("input contains NaN or Inf")
    rows, cols = t.shape
    if cfg.passthrough:
        return QuantizedTensor(cfg, rows, cols, data=t.copy())
    if t.size == 0:
        return QuantizedTensor.empty(cfg, cols)
    if cfg.axis == Axis.PER_TOKEN:
        codes, scales, zps = _kernels.quantize_groups(t, cfg.group_size, cfg.bits)
        return QuantizedTensor(cfg, rows, cols, codes, scales, zps)
    ct, st, zt = _kernels.quantize_groups(
        np.ascontiguousarray(t.T), cfg.group_size, cfg.bits
    )
    return QuantizedTensor(
        cfg,
        rows,
        cols,
        np.ascontiguousarray(ct.T),
        np.ascontiguousarray(st.T),
        np.ascontiguousarray(zt.T),
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct ``code * scale + zero_point`` as a float64 matrix."""
    if q.config.passthrough:
        return q.data.copy()
    if q.rows == 0:
        return np.zeros((0, q.cols))
    if q.config.axis == Axis.PER_TOKEN:
        return _kernels.dequantize_groups(
            q.codes, q.scales, q.zero_points, q.config.group_size
        )
    out = _kernels.dequantize_groups(
        np.ascontiguousarray(q.codes.T),
        np.ascontiguousarray(q.scales.T),
        np.ascontiguousarray(q.zero_points.T),
        q.config.group_size,
    )
    return np.ascontiguousarray(out.T)


@dataclass
class ResidualBuffer:
    """Most recent tokens held in full precision until a group completes."""

    capacity: int
    cols: int
    tokens: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.tokens is None:
            self.tokens = np.zeros((0, self.cols))

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity


def append_token(
    q: QuantizedTensor, r: ResidualBuffer, token: np.ndarray
) -> tuple[QuantizedTensor, ResidualBuffer]:
    """Stream one token row into ``(q, r)``.

    The row lands in the residual buffer; once ``group_size`` rows have
    accumulated, the block is quantized per ``q.config`` and appended to the
    codes, and the buffer empties. Streaming whole groups this way produces
    codes bit-identical to a one-shot :func:`quantize` of the same rows.
    """
    token = np.asarray(token, dtype=np.float64).reshape(-1)
    if token.shape[0] != q.cols:
        raise ShapeError(f"token length {token.shape[0]} != cols {q.cols}")
    if not np.all(np.isfinite(token)):
        raise DataError("token contains NaN or Inf")
    r.tokens = np.vstack([r.tokens, token[None, :]])
    if r.full:
        _append_block(q, r.tokens)
        r.tokens = np.zeros((0, r.cols))
    return q, r


def _append_block(q: QuantizedTensor, block: np.ndarray) -> None:
    if q.config.passthrough:
        q.data = np.vstack([q.data, block])
        q.rows += block.shape[0]
        return
    sub = quantize(block, q.config)
    q.codes = np.vstack([q.codes, sub.codes])
    q.scales = np.vstack([q.scales, sub.scales])
    q.zero_points = np.vstack([q.zero_points, sub.zero_points])
    q.rows += block.shape[0]


def append_rows(q: QuantizedTensor, rows: np.ndarray) -> QuantizedTensor:
    """Append already-complete rows without buffering.

    Valid for per-token tensors (each row forms its own groups) and for
    per-channel tensors when the row count is a multiple of the group size.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != q.cols:
        raise ShapeError(f"row width {rows.shape[1]} != cols {q.cols}")
    if rows.shape[0] == 0:
        return q
    if (
        not q.config.passthrough
        and q.config.axis == Axis.PER_CHANNEL
        and rows.shape[0] % q.config.group_size != 0
    ):
        raise ShapeError("per-channel append must supply whole groups")
    _append_block(q, rows)
    return q


# ---------------------------------------------------------------------------
# Binary dump format ("XQT1")
# ---------------------------------------------------------------------------
#
#   magic   4 bytes  b"XQT1"
#   header  5 x int32 LE: rows, cols, bits, axis, group_size
#   scales       float64 LE, group grid in row-major order
#   zero_points  float64 LE, same shape
#   codes        uint64 LE words: row-major element codes packed LSB-first
#                (bits == 16: raw float64 payload instead)

_MAGIC = b"XQT1"
_HEADER = struct.Struct("<5i")


def dump_qtensor(q: QuantizedTensor) -> bytes:
    head = _MAGIC + _HEADER.pack(
        q.rows, q.cols, q.config.bits, int(q.config.axis), q.config.group_size
    )
    if q.config.passthrough:
        return head + q.data.astype("<f8").tobytes()
    body = q.scales.astype("<f8").tobytes() + q.zero_points.astype("<f8").tobytes()
    packed = pack_codes(np.ascontiguousarray(q.codes).reshape(-1), q.config.bits)
    return head + body + packed.astype("<u8").tobytes()


def load_qtensor(blob: bytes) -> QuantizedTensor:
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}", offset=0)
    if len(blob) < 4 + _HEADER.size:
        raise FormatError("truncated header", offset=len(blob))
    rows, cols, bits, axis, group_size = _HEADER.unpack_from(blob, 4)
    try:
        cfg = QuantConfig(bits=bits, axis=Axis(axis), group_size=group_size)
    except (ValueError, ConfigError) as exc:
        raise FormatError(f"invalid header: {exc}", offset=4) from None
    off = 4 + _HEADER.size

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if len(blob) < off + nbytes:
            raise FormatError("truncated payload", offset=len(blob))
        out = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += nbytes
        return out

    if cfg.passthrough:
        data = take(rows * cols, "<f8").reshape(rows, cols).copy()
        return QuantizedTensor(cfg, rows, cols, data=data)

    if cfg.axis == Axis.PER_TOKEN:
        grid = (rows, _n_groups(cols, group_size))
    else:
        grid = (_n_groups(rows, group_size), cols)
    scales = take(grid[0] * grid[1], "<f8").reshape(grid).copy()
    zps = take(grid[0] * grid[1], "<f8").reshape(grid).copy()
    n_words = (rows * cols * bits + 63) // 64
    words = np.ascontiguousarray(take(n_words, "<u8"))
    codes = unpack_codes(words, bits, rows * cols).reshape(rows, cols)
    return QuantizedTensor(cfg, rows, cols, codes, scales, zps)
