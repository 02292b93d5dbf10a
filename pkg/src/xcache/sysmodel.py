"""Analytical performance and memory model.

Everything here is closed-form: per-layer rematerialization FLOPs, per-step
cache traffic, the breakeven sequence length at which rematerialization
stops being memory-bound on a given device, and the cache footprint of each
variant normalized to the uncompressed K/V baseline.

A multiply-accumulate counts as two FLOPs. Two conventions exist for the
GQA breakeven denominator: charging one latent cache per step or both.
The solver charges one by default (the convention the reference breakeven
lengths assume) and exposes ``gqa_text_bandwidth=True`` for the other;
the bandwidth accounting in :func:`cache_bytes` always charges both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from xcache.cache import VARIANTS, LayerPolicy
from xcache.errors import ConfigError
from xcache.quant import QuantConfig, bits_per_element

MHA_FAMILY = ("xq-mha", "xq-cl-mha")
GQA_FAMILY = ("xq-gqa", "xq-cl-gqa")
CL_FAMILY = ("xq-cl-mha", "xq-cl-gqa")


@dataclass(frozen=True)
class HardwareProfile:
    """Peak compute and bandwidth of one device."""

    name: str
    peak_flops: float
    mem_bw: float

    @property
    def ridge_point(self) -> float:
        return self.peak_flops / self.mem_bw

    @classmethod
    def h100(cls) -> "HardwareProfile":
        return cls("H100", peak_flops=756e12, mem_bw=2e12)


def arithmetic_intensity(flops: float, nbytes: float) -> float:
    """FLOPs performed per byte moved."""
    if nbytes <= 0:
        raise ConfigError("bytes transferred must be positive")
    return flops / nbytes


def mha_weight_bytes(hidden_dim: int) -> float:
    """Per-layer weight traffic of a 12*d^2-parameter MHA layer at 16-bit."""
    return 2.0 * 12.0 * hidden_dim**2


def gqa_weight_bytes(hidden_dim: int, kv_group: int) -> float:
    """Per-layer weight traffic of a GQA layer, including the K/V
    projections carried in factored form."""
    return 2.0 * 13.0 * hidden_dim**2 + 2.0 * 2.0 * (hidden_dim / kv_group) ** 2


@dataclass(frozen=True)
class VariantModel:
    """Analytical descriptor of one cache variant on one model shape."""

    variant: str
    hidden_dim: int
    kv_group: int = 1
    bits: int = 4
    accum_bits: int = 4
    n_layers: int = 32
    weight_bytes_per_layer: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.kv_group < 1:
            raise ConfigError("kv_group must be >= 1")
        if self.bits not in (2, 3, 4, 8, 16):
            raise ConfigError(f"unsupported bits {self.bits}")


def remat_flops(vm: VariantModel, seq_len: int) -> float:
    """Per-layer FLOPs to rebuild K/V for ``seq_len`` tokens."""
    if seq_len < 1:
        raise ConfigError("sequence length must be >= 1")
    d = vm.hidden_dim
    kvw = d / vm.kv_group
    if vm.variant in ("fp16", "kvq"):
        return 0.0
    if vm.variant == "xq-mha":
        return 2.0 * 2.0 * seq_len * d**2
    if vm.variant == "xq-gqa":
        return 2.0 * 2.0 * seq_len * kvw**2
    if vm.variant == "xq-cl-mha":
        # Rebuild plus one add of the cached delta into the accumulator.
        return 2.0 * 2.0 * seq_len * d**2 + 2.0 * seq_len * d
    if vm.variant == "xq-cl-gqa":
        return 2.0 * 4.0 * seq_len * kvw * d
    raise ConfigError(f"unknown variant {vm.variant!r}")


def cache_bytes(vm: VariantModel, seq_len: int) -> float:
    """Per-layer cache traffic in bytes for one decode step."""
    if seq_len < 1:
        raise ConfigError("sequence length must be >= 1")
    d = vm.hidden_dim
    kvw = d / vm.kv_group
    e = vm.bits
    if vm.variant == "fp16":
        return 2.0 * (16.0 / 8.0) * seq_len * kvw
    if vm.variant == "kvq":
        return 2.0 * (e / 8.0) * seq_len * kvw
    if vm.variant == "xq-mha":
        return (e / 8.0) * seq_len * d
    if vm.variant == "xq-gqa":
        return 2.0 * (e / 8.0) * seq_len * kvw
    if vm.variant == "xq-cl-mha":
        return (e / 8.0) * seq_len * d + (vm.accum_bits / 8.0) * seq_len * d
    if vm.variant == "xq-cl-gqa":
        return 2.0 * (e / 8.0) * seq_len * kvw + (vm.accum_bits / 8.0) * seq_len * d
    raise ConfigError(f"unknown variant {vm.variant!r}")


def _breakeven_bytes_per_token(vm: VariantModel, gqa_text_bandwidth: bool) -> float:
    # The GQA breakeven equation charges one latent per step unless the
    # text-variant flag asks for both.
    if vm.variant in GQA_FAMILY and not gqa_text_bandwidth:
        kvw = vm.hidden_dim / vm.kv_group
        per_token = (vm.bits / 8.0) * kvw
        if vm.variant in CL_FAMILY:
            per_token += (vm.accum_bits / 8.0) * vm.hidden_dim
        return per_token
    return cache_bytes(vm, 1)


def breakeven_length(
    profile: HardwareProfile,
    vm: VariantModel,
    gqa_text_bandwidth: bool = False,
) -> float:
    """Largest sequence length for which rematerialization stays
    memory-bound: solves ``P = A*l / (B*l + C)`` for ``l``.

    ``A`` is rematerialization FLOPs per token, ``B`` cache bytes per token,
    ``C`` the per-layer weight bytes. Returns ``inf`` when compute never
    becomes the bottleneck (``A <= P*B``).
    """
    p = profile.ridge_point
    a = remat_flops(vm, 1)
    b = _breakeven_bytes_per_token(vm, gqa_text_bandwidth)
    c = vm.weight_bytes_per_layer
    slack = a - p * b
    if slack <= 0:
        return math.inf
    return p * c / slack


def normalized_kv_size(
    variant: str,
    policy: LayerPolicy,
    kv_group: int = 1,
    group_size: int = 128,
    fp16_outlier_channel: bool = False,
    hidden_dim: int | None = None,
) -> float:
    """Cache footprint per token relative to the uncompressed K/V cache.

    Asymptotic accounting: per-group scale/zero-point metadata is charged,
    residual-buffer transients are not. The full-precision latent channel
    (when enabled for the GQA latent cache) adds ``16 - bits`` bits per
    token, which requires ``hidden_dim`` to normalize.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    denom = 32.0  # 2 * 16-bit per token per unit of kv width
    total = 0.0
    for layer in range(len(policy.bits)):
        e = policy.bits_for(layer)
        pe = bits_per_element(QuantConfig(bits=e, group_size=group_size))
        if variant == "fp16":
            ratio = 2.0 * 16.0 / denom
        elif variant in ("kvq", "xq-gqa", "xq-cl-gqa"):
            ratio = 2.0 * pe / denom
        else:  # xq-mha, xq-cl-mha cache the full-width input
            ratio = kv_group * pe / denom
        if variant == "xq-gqa" and fp16_outlier_channel and e != 16:
            if hidden_dim is None:
                raise ConfigError(
                    "hidden_dim is required to account the full-precision channel"
                )
            ratio += (16.0 - e) * kv_group / (denom * hidden_dim)
        total += ratio
    return total / len(policy.bits)


def report_variants(
    profile: HardwareProfile,
    variant_models: list[VariantModel],
    policies: list[LayerPolicy] | None = None,
    sequence_length: int = 1000,
    gqa_text_bandwidth: bool = False,
) -> list[dict]:
    """One row per variant model: footprint, breakeven, and the raw
    FLOP/byte counts at ``sequence_length``."""
    if not variant_models:
        raise ConfigError("no variant models supplied")
    if policies is None:
        policies = [
            LayerPolicy.uniform(vm.bits, vm.n_layers) for vm in variant_models
        ]
    rows = []
    for vm, policy in zip(variant_models, policies):
        rows.append(
            {
                "variant": vm.variant,
                "bits": vm.bits,
                "normalized_kv_size": normalized_kv_size(
                    vm.variant, policy, vm.kv_group
                ),
                "breakeven_length": breakeven_length(
                    profile, vm, gqa_text_bandwidth
                ),
                "remat_flops": remat_flops(vm, sequence_length),
                "bytes_moved": cache_bytes(vm, sequence_length)
                + vm.weight_bytes_per_layer,
            }
        )
    return rows
