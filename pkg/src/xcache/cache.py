"""Per-layer attention-cache backends.

Six interchangeable strategies share one interface (prefill, decode_append,
rematerialize) and differ in what they persist:

* ``fp16``: Keys (pre-rotation) and Values in full precision.
* ``kvq``: Keys quantized per-channel (pre-rotation), Values per-token,
  both with residual buffers for decoding.
* ``xq-mha``: the post-norm layer input quantized per-token; K/V are
  recomputed through the projection weights on demand.
* ``xq-gqa``: the input down-projected by the left singular factors of
  the K/V projections, cached in the narrow latent space.
* ``xq-cl-mha``: per-layer deltas of the input against a running
  cross-layer accumulator.
* ``xq-cl-gqa``: the same deltas, down-projected into the shared latent
  space of the concatenated K/V projection.

The cross-layer variants treat the accumulator as transient per forward
pass: it is seeded from the base layer's cache and each later layer adds the
reconstruction of its own cached deltas, so at any point the accumulator
equals the base input plus the sum of dequantized deltas by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from xcache.errors import ConfigError, ShapeError, UsageError
from xcache.linalg import SvdFactors, apply_rope
from xcache.quant import (
    Axis,
    QuantConfig,
    QuantizedTensor,
    ResidualBuffer,
    append_rows,
    dequantize,
)

VARIANTS = ("fp16", "kvq", "xq-mha", "xq-gqa", "xq-cl-mha", "xq-cl-gqa")
CL_VARIANTS = ("xq-cl-mha", "xq-cl-gqa")

DEFAULT_GROUP_SIZE = 128
DEFAULT_ACCUMULATOR_BITS = 4


@dataclass
class LayerWeights:
    """Projection and MLP weights of one decoder layer.

    ``svd_k``/``svd_v`` factor the K/V projections individually;
    ``svd_kv`` factors their column-wise concatenation. All three are
    computed offline at model build/load time.
    """

    gamma_attn: np.ndarray
    gamma_mlp: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    svd_k: SvdFactors | None = None
    svd_v: SvdFactors | None = None
    svd_kv: SvdFactors | None = None


@dataclass
class LayerPolicy:
    """Per-layer bit widths plus the cross-layer base/prefix structure.

    ``base_layers`` counts the leading layers that cross-layer variants
    cache directly (non-delta); the last of them seeds the accumulator.
    ``high_precision_prefix`` counts the leading layers held at 4-bit.
    """

    bits: list[int]
    base_layers: int = 3
    high_precision_prefix: int = 3

    def __post_init__(self):
        if self.base_layers > self.high_precision_prefix:
            raise ConfigError(
                "base_layers must not exceed high_precision_prefix"
            )

    @classmethod
    def for_bits(
        cls,
        bits: int,
        n_layers: int,
        prefix: int = 3,
        prefix_bits: int = 4,
    ) -> "LayerPolicy":
        """Uniform ``bits`` with the leading layers kept at 4-bit.

        Pass-through (16-bit) stays uniform; the prefix never lowers a
        layer below the requested width.
        """
        if bits == 16:
            return cls([16] * n_layers, base_layers=min(prefix, n_layers))
        per_layer = [
            max(bits, prefix_bits) if i < prefix else bits
            for i in range(n_layers)
        ]
        return cls(
            per_layer,
            base_layers=min(prefix, n_layers),
            high_precision_prefix=min(prefix, n_layers),
        )

    @classmethod
    def uniform(cls, bits: int, n_layers: int) -> "LayerPolicy":
        """Same width everywhere (no high-precision prefix)."""
        n = min(3, n_layers)
        return cls([bits] * n_layers, base_layers=n, high_precision_prefix=n)

    def bits_for(self, layer: int) -> int:
        return self.bits[layer]


@dataclass
class Accumulator:
    """Running cross-layer reconstruction of the layer input.

    Transient per forward pass: seeded from the base layer, then updated in
    strict layer order. ``accounting_bits`` is the storage width charged by
    the performance model; the in-memory array stays float64.
    """

    accounting_bits: int = DEFAULT_ACCUMULATOR_BITS
    x_hat: np.ndarray | None = None

    def seed(self, x: np.ndarray) -> None:
        self.x_hat = np.array(x, dtype=np.float64)

    def add(self, delta: np.ndarray) -> None:
        if self.x_hat is None:
            raise UsageError("accumulator used before the base layer seeded it")
        if delta.shape != self.x_hat.shape:
            raise ShapeError(
                f"accumulator shape {self.x_hat.shape} vs update {delta.shape}"
            )
        self.x_hat = self.x_hat + delta


# ---------------------------------------------------------------------------
# Streaming adapter shared by all quantized payloads
# ---------------------------------------------------------------------------


class _Stream:
    """A quantized tensor fed row by row, with optional residual buffering.

    Per-channel payloads always buffer during decoding (their groups span
    tokens); per-token payloads buffer only when the variant adopts the
    residual method. The first latent channel can be held verbatim in full
    precision.
    """

    def __init__(
        self,
        bits: int,
        axis: Axis,
        width: int,
        group_size: int,
        buffered: bool,
        keep_first_channel: bool = False,
    ):
        self.width = width
        self.buffered = buffered or axis == Axis.PER_CHANNEL
        self.keep_first_channel = keep_first_channel and bits != 16
        stored = width - 1 if self.keep_first_channel else width
        self.cfg = QuantConfig(bits=bits, axis=axis, group_size=group_size)
        self.q = QuantizedTensor.empty(self.cfg, stored)
        self.buf = ResidualBuffer(group_size, width)
        self.first_channel = np.zeros(0)

    def __len__(self) -> int:
        return self.q.rows + len(self.buf)

    def _flush(self, block: np.ndarray) -> None:
        if self.keep_first_channel:
            self.first_channel = np.concatenate([self.first_channel, block[:, 0]])
            append_rows(self.q, np.ascontiguousarray(block[:, 1:]))
        else:
            append_rows(self.q, block)

    def bulk(self, mat: np.ndarray) -> None:
        """Prefill path.

        Per-token payloads quantize completely (each row forms its own
        groups); per-channel payloads quantize whole groups and leave the
        tail rows buffered.
        """
        if mat.shape[1] != self.width:
            raise ShapeError(f"expected width {self.width}, got {mat.shape[1]}")
        if self.cfg.axis == Axis.PER_TOKEN:
            self._flush(mat)
            return
        g = self.cfg.group_size
        block = np.vstack([self.buf.tokens, mat]) if len(self.buf) else mat
        n_full = block.shape[0] // g * g
        for i in range(0, n_full, g):
            self._flush(block[i : i + g])
        self.buf.tokens = np.array(block[n_full:], dtype=np.float64)

    def push(self, row: np.ndarray) -> None:
        """Decode path: one row, flushing when a group completes."""
        row = np.asarray(row, dtype=np.float64).reshape(1, -1)
        if row.shape[1] != self.width:
            raise ShapeError(f"expected width {self.width}, got {row.shape[1]}")
        if not self.buffered:
            self._flush(row)
            return
        self.buf.tokens = np.vstack([self.buf.tokens, row])
        if self.buf.full:
            self._flush(self.buf.tokens)
            self.buf.tokens = np.zeros((0, self.width))

    def reconstruct(self) -> np.ndarray:
        """Dequantized rows plus any buffered rows, in token order."""
        flushed = dequantize(self.q)
        if self.keep_first_channel:
            flushed = np.hstack([self.first_channel[:, None], flushed])
        if len(self.buf):
            return np.vstack([flushed, self.buf.tokens])
        return flushed


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class CacheBackend:
    """Common interface; concrete variants fill in the payload mapping."""

    variant: str = ""
    needs_accumulator = False

    def __init__(self, layer_index: int, policy: LayerPolicy, head_dim: int,
                 group_size: int = DEFAULT_GROUP_SIZE):
        self.layer_index = layer_index
        self.policy = policy
        self.head_dim = head_dim
        self.group_size = group_size
        self.bits = policy.bits_for(layer_index)
        self.n_tokens = 0

    # -- interface ---------------------------------------------------------

    def prefill(self, x: np.ndarray, weights: LayerWeights,
                acc: Accumulator | None = None) -> None:
        x = np.asarray(x, dtype=np.float64)
        if self.n_tokens:
            raise UsageError("prefill on a non-empty cache")
        self._check_acc(acc)
        self._prefill(x, weights, acc)
        self.n_tokens = x.shape[0]

    def decode_append(self, x_token: np.ndarray, weights: LayerWeights,
                      acc: Accumulator | None = None) -> None:
        row = np.asarray(x_token, dtype=np.float64).reshape(1, -1)
        self._check_acc(acc)
        self._decode(row, weights, acc)
        self.n_tokens += 1

    def rematerialize(self, weights: LayerWeights, positions: np.ndarray,
                      acc: Accumulator | None = None) -> tuple[np.ndarray, np.ndarray]:
        if self.n_tokens == 0:
            raise UsageError("rematerialize on an empty cache")
        positions = np.asarray(positions).reshape(-1)
        if positions.shape[0] != self.n_tokens:
            raise ShapeError(
                f"got {positions.shape[0]} positions for {self.n_tokens} tokens"
            )
        self._check_acc(acc)
        return self._rematerialize(weights, positions, acc)

    # -- hooks --------------------------------------------------------------

    def _prefill(self, x, weights, acc):  # pragma: no cover - abstract
        raise NotImplementedError

    def _decode(self, row, weights, acc):  # pragma: no cover - abstract
        raise NotImplementedError

    def _rematerialize(self, weights, positions, acc):  # pragma: no cover
        raise NotImplementedError

    def _check_acc(self, acc):
        if self.needs_accumulator and acc is None:
            raise UsageError(f"{self.variant} requires an accumulator")

    def _rope(self, k_pre: np.ndarray, positions: np.ndarray) -> np.ndarray:
        return apply_rope(k_pre, positions, self.head_dim)


class FullPrecisionCache(CacheBackend):
    """Keys (pre-rotation) and Values stored verbatim."""

    variant = "fp16"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.k_pre: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def _prefill(self, x, weights, acc):
        self.k_pre = x @ weights.w_k
        self.v = x @ weights.w_v

    def _decode(self, row, weights, acc):
        self.k_pre = np.vstack([self.k_pre, row @ weights.w_k]) \
            if self.k_pre is not None else row @ weights.w_k
        self.v = np.vstack([self.v, row @ weights.w_v]) \
            if self.v is not None else row @ weights.w_v

    def _rematerialize(self, weights, positions, acc):
        return self._rope(self.k_pre, positions), self.v.copy()


class QuantizedKvCache(CacheBackend):
    """Quantized K/V baseline: per-channel Keys before rotation, per-token
    Values, both with residual buffers during decoding."""

    variant = "kvq"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.k_stream: _Stream | None = None
        self.v_stream: _Stream | None = None

    def _ensure(self, width: int) -> None:
        if self.k_stream is None:
            self.k_stream = _Stream(self.bits, Axis.PER_CHANNEL, width,
                                    self.group_size, buffered=True)
            self.v_stream = _Stream(self.bits, Axis.PER_TOKEN, width,
                                    self.group_size, buffered=True)

    def _prefill(self, x, weights, acc):
        k = x @ weights.w_k
        v = x @ weights.w_v
        self._ensure(k.shape[1])
        self.k_stream.bulk(k)
        self.v_stream.bulk(v)

    def _decode(self, row, weights, acc):
        self._ensure(weights.w_k.shape[1])
        self.k_stream.push(row @ weights.w_k)
        self.v_stream.push(row @ weights.w_v)

    def _rematerialize(self, weights, positions, acc):
        return (
            self._rope(self.k_stream.reconstruct(), positions),
            self.v_stream.reconstruct(),
        )


class InputCacheMHA(CacheBackend):
    """Cache the post-norm layer input itself (per-token); recompute K/V."""

    variant = "xq-mha"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.x_stream: _Stream | None = None

    def _ensure(self, width: int) -> None:
        if self.x_stream is None:
            self.x_stream = _Stream(self.bits, Axis.PER_TOKEN, width,
                                    self.group_size, buffered=False)

    def _prefill(self, x, weights, acc):
        self._ensure(x.shape[1])
        self.x_stream.bulk(x)

    def _decode(self, row, weights, acc):
        self._ensure(row.shape[1])
        self.x_stream.push(row)

    def _rematerialize(self, weights, positions, acc):
        x_hat = self.x_stream.reconstruct()
        return self._rope(x_hat @ weights.w_k, positions), x_hat @ weights.w_v


class LatentInputCacheGQA(CacheBackend):
    """Cache the input projected into the K/V left-singular subspaces.

    The K latent is quantized per-channel (buffered), the V latent per-token;
    K/V come back through the fused ``diag(sigma) @ b_t`` weights. Channel 0
    of the K latent can be pinned to full precision.
    """

    variant = "xq-gqa"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.k_stream: _Stream | None = None
        self.v_stream: _Stream | None = None
        self.fp16_first_channel = False

    def set_fp16_first_channel(self, enable: bool) -> None:
        if self.n_tokens:
            raise UsageError("toggle the full-precision channel before caching")
        self.fp16_first_channel = bool(enable)
        self.k_stream = None
        self.v_stream = None

    def _ensure(self, width: int) -> None:
        if self.k_stream is None:
            self.k_stream = _Stream(
                self.bits, Axis.PER_CHANNEL, width, self.group_size,
                buffered=True, keep_first_channel=self.fp16_first_channel,
            )
            self.v_stream = _Stream(self.bits, Axis.PER_TOKEN, width,
                                    self.group_size, buffered=False)

    def _prefill(self, x, weights, acc):
        lat_k = x @ weights.svd_k.u
        lat_v = x @ weights.svd_v.u
        self._ensure(lat_k.shape[1])
        self.k_stream.bulk(lat_k)
        self.v_stream.bulk(lat_v)

    def _decode(self, row, weights, acc):
        self._ensure(weights.svd_k.u.shape[1])
        self.k_stream.push(row @ weights.svd_k.u)
        self.v_stream.push(row @ weights.svd_v.u)

    def _rematerialize(self, weights, positions, acc):
        k_pre = self.k_stream.reconstruct() @ weights.svd_k.fused
        v = self.v_stream.reconstruct() @ weights.svd_v.fused
        return self._rope(k_pre, positions), v


class _DeltaBackend(CacheBackend):
    """Shared logic of the cross-layer variants.

    Layers below ``policy.base_layers`` cache the input directly; the last
    of them seeds the accumulator with its reconstruction. Later layers
    cache the delta against the accumulator and then add their full cached
    reconstruction to it, keeping the running value equal to the from-scratch
    sum at every step.
    """

    needs_accumulator = True

    @property
    def is_base(self) -> bool:
        return self.layer_index < self.policy.base_layers

    @property
    def seeds_accumulator(self) -> bool:
        return self.layer_index == self.policy.base_layers - 1

    def _prefill(self, x, weights, acc):
        if self.policy.base_layers < 1:
            raise ConfigError("cross-layer variants need at least one base layer")
        if self.is_base:
            self._store_base(x, weights)
            if self.seeds_accumulator:
                acc.seed(self._reconstruct_base(weights))
            return
        delta = x - acc.x_hat
        self._store_delta(delta, weights)
        acc.add(self._reconstruct_delta(weights))

    def _decode(self, row, weights, acc):
        if self.is_base:
            self._push_base(row, weights)
            if self.seeds_accumulator:
                acc.seed(self._reconstruct_base(weights))
            return
        pos = self.n_tokens  # row index of the new token
        delta_row = row - acc.x_hat[pos : pos + 1]
        self._push_delta(delta_row, weights)
        acc.add(self._reconstruct_delta(weights))

    # Base layers rematerialize from their own cache; delta layers from the
    # accumulator, which already includes this layer's deltas.
    def _rematerialize(self, weights, positions, acc):
        if self.is_base:
            return self._remat_base(weights, positions)
        return self._remat_delta(weights, positions, acc)


class DeltaInputCacheMHA(_DeltaBackend):
    """Cross-layer deltas of the full-width input, quantized per-token."""

    variant = "xq-cl-mha"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.stream: _Stream | None = None

    def _ensure(self, width: int) -> None:
        if self.stream is None:
            self.stream = _Stream(self.bits, Axis.PER_TOKEN, width,
                                  self.group_size, buffered=False)

    def _store_base(self, x, weights):
        self._ensure(x.shape[1])
        self.stream.bulk(x)

    def _push_base(self, row, weights):
        self._ensure(row.shape[1])
        self.stream.push(row)

    def _reconstruct_base(self, weights):
        return self.stream.reconstruct()

    def _store_delta(self, delta, weights):
        self._ensure(delta.shape[1])
        self.stream.bulk(delta)

    def _push_delta(self, delta_row, weights):
        self._ensure(delta_row.shape[1])
        self.stream.push(delta_row)

    def _reconstruct_delta(self, weights):
        return self.stream.reconstruct()

    def _remat_base(self, weights, positions):
        x_hat = self.stream.reconstruct()
        return self._rope(x_hat @ weights.w_k, positions), x_hat @ weights.w_v

    def _remat_delta(self, weights, positions, acc):
        return (
            self._rope(acc.x_hat @ weights.w_k, positions),
            acc.x_hat @ weights.w_v,
        )


class DeltaLatentCacheGQA(_DeltaBackend):
    """Cross-layer deltas in the shared latent space of ``[w_k | w_v]``.

    Base layers cache the latent input; delta layers cache the latent delta
    (per-channel, buffered) and rebuild full-width contributions through the
    transposed subspace basis.
    """

    variant = "xq-cl-gqa"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.stream: _Stream | None = None

    @staticmethod
    def _subspace(weights: LayerWeights) -> SvdFactors:
        if weights.svd_kv is None:
            raise ConfigError(
                "xq-cl-gqa needs a shared K/V subspace (kv_group >= 2)"
            )
        return weights.svd_kv

    def _ensure(self, width: int) -> None:
        if self.stream is None:
            self.stream = _Stream(self.bits, Axis.PER_CHANNEL, width,
                                  self.group_size, buffered=True)

    def _store_base(self, x, weights):
        sub = self._subspace(weights)
        self._ensure(sub.u.shape[1])
        self.stream.bulk(x @ sub.u)

    def _push_base(self, row, weights):
        sub = self._subspace(weights)
        self._ensure(sub.u.shape[1])
        self.stream.push(row @ sub.u)

    def _reconstruct_base(self, weights):
        return self.stream.reconstruct() @ weights.svd_kv.u.T

    def _store_delta(self, delta, weights):
        sub = self._subspace(weights)
        self._ensure(sub.u.shape[1])
        self.stream.bulk(delta @ sub.u)

    def _push_delta(self, delta_row, weights):
        sub = self._subspace(weights)
        self._ensure(sub.u.shape[1])
        self.stream.push(delta_row @ sub.u)

    def _reconstruct_delta(self, weights):
        return self.stream.reconstruct() @ weights.svd_kv.u.T

    def _remat_base(self, weights, positions):
        kv = self.stream.reconstruct() @ self._subspace(weights).fused
        return self._split_kv(kv, weights, positions)

    def _remat_delta(self, weights, positions, acc):
        sub = self._subspace(weights)
        kv = (acc.x_hat @ sub.u) @ sub.fused
        return self._split_kv(kv, weights, positions)

    def _split_kv(self, kv, weights, positions):
        kv_width = weights.w_k.shape[1]
        k_pre = kv[:, :kv_width]
        v = kv[:, kv_width:]
        return self._rope(k_pre, positions), np.ascontiguousarray(v)


_BACKENDS = {
    cls.variant: cls
    for cls in (
        FullPrecisionCache,
        QuantizedKvCache,
        InputCacheMHA,
        LatentInputCacheGQA,
        DeltaInputCacheMHA,
        DeltaLatentCacheGQA,
    )
}


def make_cache(
    variant: str,
    layer_index: int,
    policy: LayerPolicy,
    head_dim: int,
    group_size: int = DEFAULT_GROUP_SIZE,
) -> CacheBackend:
    """Instantiate the backend for one (layer, sequence)."""
    if variant not in _BACKENDS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return _BACKENDS[variant](layer_index, policy, head_dim, group_size)


# Free-function surface mirroring the backend methods.


def prefill(state: CacheBackend, x_postnorm: np.ndarray, weights: LayerWeights,
            acc: Accumulator | None = None) -> CacheBackend:
    state.prefill(x_postnorm, weights, acc)
    return state


def decode_append(state: CacheBackend, x_token: np.ndarray, weights: LayerWeights,
                  acc: Accumulator | None = None) -> CacheBackend:
    state.decode_append(x_token, weights, acc)
    return state


def rematerialize(state: CacheBackend, weights: LayerWeights, positions: np.ndarray,
                  acc: Accumulator | None = None) -> tuple[np.ndarray, np.ndarray]:
    return state.rematerialize(weights, positions, acc)


def fp16_outlier_channel_variant(state: CacheBackend, enable: bool) -> CacheBackend:
    """Pin channel 0 of the K latent to full precision (GQA latent cache only)."""
    if not isinstance(state, LatentInputCacheGQA):
        raise UsageError("full-precision outlier channel applies to xq-gqa only")
    state.set_fp16_first_channel(enable)
    return state
