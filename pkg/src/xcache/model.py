"""Desk-scale decoder-only transformer harness.

Each layer is RMSNorm -> attention (with a pluggable cache backend) ->
RMSNorm -> MLP, with residual connections. Weights are synthetic and fully
deterministic given the seed; the MLP/attention output projections are
scaled by ``mlp_scale`` so the per-layer change of the residual stream can
be made small on purpose (the regime where cross-layer deltas compress
well).

Evaluation is paired: every variant run is compared against a
full-precision run of the same weights, reporting relative logit errors and
the change in teacher-forced NLL.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from xcache import sysmodel
from xcache.cache import (
    CL_VARIANTS,
    VARIANTS,
    Accumulator,
    CacheBackend,
    LayerPolicy,
    LayerWeights,
    make_cache,
)
from xcache.errors import ConfigError, DataError, FormatError
from xcache.linalg import RngState, apply_rope, gen_weights, rms_norm, svd_thin

RMS_EPS = 1e-6
MLP_RATIO = 4


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    n_layers: int = 8
    n_heads: int = 8
    kv_group: int = 1
    vocab_size: int = 256
    mlp_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden_dim", "n_layers", "n_heads", "kv_group", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.n_heads % self.kv_group:
            raise ConfigError(
                f"n_heads {self.n_heads} not divisible by kv_group {self.kv_group}"
            )
        if self.mlp_scale < 0:
            raise ConfigError("mlp_scale must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def kv_width(self) -> int:
        return self.hidden_dim // self.kv_group


@dataclass
class Model:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights]
    final_gain: np.ndarray


@dataclass
class EvalReport:
    """Paired comparison of one variant run against the FP baseline.

    Logit errors are relative to the largest-magnitude baseline logit;
    ``normalized_cache_bits`` is the analytical footprint relative to the
    uncompressed K/V cache.
    """

    variant: str
    bits: int
    max_logit_err: float
    mean_logit_err: float
    nll_delta: float
    normalized_cache_bits: float


def build_model(cfg: ModelConfig) -> Model:
    """Deterministic synthetic weights plus the offline SVD factors."""
    rng = RngState(cfg.seed)
    d = cfg.hidden_dim
    kvw = cfg.kv_width
    hidden = MLP_RATIO * d
    # Unit-RMS embedding rows keep the residual stream O(1), so the scaled
    # output projections control the per-layer input change directly.
    embedding = gen_weights(rng, cfg.vocab_size, d, scale=np.sqrt(d))
    layers = []
    for _ in range(cfg.n_layers):
        w_q = gen_weights(rng, d, d)
        w_k = gen_weights(rng, d, kvw)
        w_v = gen_weights(rng, d, kvw)
        # Output projections are drawn at unit scale and multiplied down so
        # the RNG stream is identical across mlp_scale values (and 0 works).
        w_o = gen_weights(rng, d, d) * cfg.mlp_scale
        w_up = gen_weights(rng, d, hidden)
        w_down = gen_weights(rng, hidden, d) * cfg.mlp_scale
        layers.append(
            LayerWeights(
                gamma_attn=np.ones(d),
                gamma_mlp=np.ones(d),
                w_q=w_q,
                w_k=w_k,
                w_v=w_v,
                w_o=w_o,
                w_up=w_up,
                w_down=w_down,
            )
        )
    model = Model(cfg, embedding, layers, np.ones(d))
    _attach_svd_factors(model)
    return model


def _attach_svd_factors(model: Model) -> None:
    keep_concat = 2 * model.config.kv_width <= model.config.hidden_dim
    for lw in model.layers:
        lw.svd_k = svd_thin(lw.w_k)
        lw.svd_v = svd_thin(lw.w_v)
        # The shared subspace of [w_k | w_v] only compresses (and only has
        # orthonormal columns) when the stacked width fits the hidden dim.
        lw.svd_kv = (
            svd_thin(np.hstack([lw.w_k, lw.w_v])) if keep_concat else None
        )


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    n_heads: int,
    kv_group: int,
) -> np.ndarray:
    """Causal softmax attention with grouped K/V heads.

    ``q`` has ``n_heads`` heads; ``k``/``v`` have ``n_heads // kv_group``.
    Query rows are assumed to be the trailing rows of the key timeline.
    """
    l_q, d = q.shape
    l_k = k.shape[0]
    head_dim = d // n_heads
    offset = l_k - l_q
    scale = 1.0 / np.sqrt(head_dim)
    cols = np.arange(l_k)[None, :]
    rows = np.arange(l_q)[:, None]
    blocked = cols > rows + offset
    out = np.empty((l_q, d))
    for h in range(n_heads):
        kv_h = h // kv_group
        qh = q[:, h * head_dim : (h + 1) * head_dim]
        kh = k[:, kv_h * head_dim : (kv_h + 1) * head_dim]
        vh = v[:, kv_h * head_dim : (kv_h + 1) * head_dim]
        scores = (qh @ kh.T) * scale
        scores[blocked] = -np.inf
        scores -= scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        out[:, h * head_dim : (h + 1) * head_dim] = weights @ vh
    return out


class _Session:
    """One sequence being processed: per-layer cache states plus positions."""

    def __init__(self, model: Model, variant: str, policy: LayerPolicy):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        if variant in CL_VARIANTS and policy.base_layers < 1:
            raise ConfigError("cross-layer variants need at least one base layer")
        self.model = model
        self.variant = variant
        self.policy = policy
        self.caches: list[CacheBackend] = [
            make_cache(variant, i, policy, model.config.head_dim)
            for i in range(model.config.n_layers)
        ]
        self.n_tokens = 0

    def _needs_acc(self) -> bool:
        return self.variant in CL_VARIANTS

    def prefill(self, tokens: np.ndarray) -> np.ndarray:
        """Run the full sequence through all layers; returns logits."""
        cfg = self.model.config
        positions = np.arange(len(tokens))
        acc = Accumulator() if self._needs_acc() else None
        h = self.model.embedding[tokens]
        for lw, cache in zip(self.model.layers, self.caches):
            x = rms_norm(h, lw.gamma_attn, RMS_EPS)
            cache.prefill(x, lw, acc)
            k, v = cache.rematerialize(lw, positions, acc)
            q = apply_rope(x @ lw.w_q, positions, cfg.head_dim)
            ctx = _attention(q, k, v, cfg.n_heads, cfg.kv_group)
            h = h + ctx @ lw.w_o
            x2 = rms_norm(h, lw.gamma_mlp, RMS_EPS)
            h = h + _silu(x2 @ lw.w_up) @ lw.w_down
        self.n_tokens = len(tokens)
        return rms_norm(h, self.model.final_gain, RMS_EPS) @ self.model.embedding.T

    def decode(self, token: int) -> np.ndarray:
        """Append one token; returns the logits row for its position."""
        cfg = self.model.config
        pos = self.n_tokens
        positions = np.arange(pos + 1)
        acc = Accumulator() if self._needs_acc() else None
        h = self.model.embedding[token : token + 1]
        for lw, cache in zip(self.model.layers, self.caches):
            x = rms_norm(h, lw.gamma_attn, RMS_EPS)
            cache.decode_append(x[0], lw, acc)
            k, v = cache.rematerialize(lw, positions, acc)
            q = apply_rope(x @ lw.w_q, np.array([pos]), cfg.head_dim)
            ctx = _attention(q, k, v, cfg.n_heads, cfg.kv_group)
            h = h + ctx @ lw.w_o
            x2 = rms_norm(h, lw.gamma_mlp, RMS_EPS)
            h = h + _silu(x2 @ lw.w_up) @ lw.w_down
        self.n_tokens += 1
        return (rms_norm(h, self.model.final_gain, RMS_EPS) @ self.model.embedding.T)[0]


def _check_tokens(model: Model, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise DataError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise DataError("token id outside the vocabulary")
    return tokens


def teacher_forced_logits(
    model: Model, tokens, variant: str, policy: LayerPolicy
) -> np.ndarray:
    tokens = _check_tokens(model, tokens)
    return _Session(model, variant, policy).prefill(tokens)


def teacher_forced_nll(logits: np.ndarray, tokens: np.ndarray) -> float:
    """Mean negative log-likelihood of each next token under the logits."""
    if len(tokens) < 2:
        return 0.0
    shifted = logits[:-1]
    targets = np.asarray(tokens[1:], dtype=np.int64)
    m = shifted.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(shifted - m).sum(axis=1))
    picked = shifted[np.arange(len(targets)), targets]
    return float(np.mean(logz - picked))


def forward_teacher_forced(
    model: Model,
    tokens,
    variant: str,
    bits: int,
    policy: LayerPolicy | None = None,
) -> tuple[np.ndarray, EvalReport]:
    """Prefill the whole sequence under ``variant`` and compare against a
    fresh full-precision run of the same weights."""
    tokens = _check_tokens(model, tokens)
    if policy is None:
        policy = LayerPolicy.for_bits(bits, model.config.n_layers)
    fp_policy = LayerPolicy.for_bits(16, model.config.n_layers)
    fp_logits = teacher_forced_logits(model, tokens, "fp16", fp_policy)
    if variant == "fp16":
        logits = fp_logits
    else:
        logits = teacher_forced_logits(model, tokens, variant, policy)
    denom = float(np.max(np.abs(fp_logits)))
    if denom == 0.0:
        denom = 1.0
    diff = np.abs(logits - fp_logits)
    report = EvalReport(
        variant=variant,
        bits=bits,
        max_logit_err=float(diff.max()) / denom,
        mean_logit_err=float(diff.mean()) / denom,
        nll_delta=teacher_forced_nll(logits, tokens)
        - teacher_forced_nll(fp_logits, tokens),
        normalized_cache_bits=sysmodel.normalized_kv_size(
            variant, policy, model.config.kv_group
        ),
    )
    return logits, report


def generate(
    model: Model,
    prompt,
    n_new: int,
    variant: str,
    bits: int,
    policy: LayerPolicy | None = None,
) -> np.ndarray:
    """Greedy decoding; exercises the per-token decode and residual flushing."""
    prompt = _check_tokens(model, prompt)
    if n_new < 1:
        raise ConfigError("n_new must be >= 1")
    if policy is None:
        policy = LayerPolicy.for_bits(bits, model.config.n_layers)
    session = _Session(model, variant, policy)
    logits = session.prefill(prompt)
    out = list(prompt)
    next_token = int(np.argmax(logits[-1]))
    out.append(next_token)
    for _ in range(n_new - 1):
        row = session.decode(next_token)
        next_token = int(np.argmax(row))
        out.append(next_token)
    return np.array(out, dtype=np.int64)


def layer_inputs(model: Model, tokens) -> list[np.ndarray]:
    """Post-norm attention inputs of every layer from a full-precision run."""
    tokens = _check_tokens(model, tokens)
    cfg = model.config
    policy = LayerPolicy.for_bits(16, cfg.n_layers)
    positions = np.arange(len(tokens))
    h = model.embedding[tokens]
    collected = []
    for i, lw in enumerate(model.layers):
        cache = make_cache("fp16", i, policy, cfg.head_dim)
        x = rms_norm(h, lw.gamma_attn, RMS_EPS)
        collected.append(x)
        cache.prefill(x, lw)
        k, v = cache.rematerialize(lw, positions)
        q = apply_rope(x @ lw.w_q, positions, cfg.head_dim)
        ctx = _attention(q, k, v, cfg.n_heads, cfg.kv_group)
        h = h + ctx @ lw.w_o
        x2 = rms_norm(h, lw.gamma_mlp, RMS_EPS)
        h = h + _silu(x2 @ lw.w_up) @ lw.w_down
    return collected


# ---------------------------------------------------------------------------
# Weight file format ("XQW1")
# ---------------------------------------------------------------------------
#
#   magic   4 bytes  b"XQW1"
#   header  5 x int32 LE: hidden_dim, n_layers, n_heads, kv_group, vocab_size
#           1 x float32 LE: mlp_scale
#           2 x uint32 LE: seed (low word, high word)
#   arrays  float32 LE, row-major, in declared order:
#           embedding (vocab x d);
#           per layer: gamma_attn (d), gamma_mlp (d), w_q (d x d),
#                      w_k (d x d/g), w_v (d x d/g), w_o (d x d),
#                      w_up (d x 4d), w_down (4d x d);
#           final_gain (d)

_W_MAGIC = b"XQW1"
_W_HEADER = struct.Struct("<5ifII")


def _declared_arrays(model: Model):
    yield model.embedding
    for lw in model.layers:
        yield lw.gamma_attn
        yield lw.gamma_mlp
        yield lw.w_q
        yield lw.w_k
        yield lw.w_v
        yield lw.w_o
        yield lw.w_up
        yield lw.w_down
    yield model.final_gain


def save_weights(model: Model, path: str) -> None:
    cfg = model.config
    parts = [
        _W_MAGIC,
        _W_HEADER.pack(
            cfg.hidden_dim,
            cfg.n_layers,
            cfg.n_heads,
            cfg.kv_group,
            cfg.vocab_size,
            cfg.mlp_scale,
            cfg.seed & 0xFFFFFFFF,
            (cfg.seed >> 32) & 0xFFFFFFFF,
        ),
    ]
    parts.extend(np.ascontiguousarray(a, dtype="<f4").tobytes()
                 for a in _declared_arrays(model))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_weights(path: str) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _W_MAGIC:
        raise FormatError(
            f"bad magic {blob[:4]!r}, expected {_W_MAGIC!r}", offset=0
        )
    if len(blob) < 4 + _W_HEADER.size:
        raise FormatError("truncated header", offset=len(blob))
    d, n_layers, n_heads, kv_group, vocab, mlp_scale, seed_lo, seed_hi = (
        _W_HEADER.unpack_from(blob, 4)
    )
    try:
        cfg = ModelConfig(
            hidden_dim=d,
            n_layers=n_layers,
            n_heads=n_heads,
            kv_group=kv_group,
            vocab_size=vocab,
            mlp_scale=float(mlp_scale),
            seed=seed_lo | (seed_hi << 32),
        )
    except ConfigError as exc:
        raise FormatError(f"invalid header: {exc}", offset=4) from None

    off = 4 + _W_HEADER.size

    def take(shape) -> np.ndarray:
        nonlocal off
        count = int(np.prod(shape))
        nbytes = count * 4
        if len(blob) < off + nbytes:
            raise FormatError("truncated weight payload", offset=len(blob))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += nbytes
        return arr.astype(np.float64).reshape(shape)

    kvw = cfg.kv_width
    hidden = MLP_RATIO * d
    embedding = take((vocab, d))
    layers = []
    for _ in range(n_layers):
        layers.append(
            LayerWeights(
                gamma_attn=take((d,)),
                gamma_mlp=take((d,)),
                w_q=take((d, d)),
                w_k=take((d, kvw)),
                w_v=take((d, kvw)),
                w_o=take((d, d)),
                w_up=take((d, hidden)),
                w_down=take((hidden, d)),
            )
        )
    final_gain = take((d,))
    if off != len(blob):
        raise FormatError(
            f"{len(blob) - off} unexpected trailing bytes", offset=off
        )
    model = Model(cfg, embedding, layers, final_gain)
    _attach_svd_factors(model)
    return model
