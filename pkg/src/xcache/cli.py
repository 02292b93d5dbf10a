"""Command-line front end.

Four subcommands, all JSON-config in / CSV out:

* ``xcache eval``: paired variant-vs-baseline logit evaluation.
* ``xcache roofline``: breakeven lengths and normalized footprints.
* ``xcache outliers``: outlier-channel prediction accuracy.
* ``xcache weights``: save / load / inspect weight files.

Configs carry ``"schema": 1`` and are validated strictly (unknown keys are
rejected). Reports are UTF-8 CSV with LF line endings and 17-significant-
digit floats, so identical configs reproduce byte-identical files. Exit
codes: 0 success, 2 config/format error, 3 numerical failure, 4 internal
invariant violation. ``XCACHE_THREADS`` caps row-level parallelism.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from xcache import analysis, model as model_mod, sysmodel
from xcache.cache import VARIANTS, LayerPolicy
from xcache.errors import ConfigError, FormatError, NumericalError, XCacheError
from xcache.linalg import RngState, svd_thin

SCHEMA_VERSION = 1
VALID_BITS = (2, 3, 4, 8, 16)


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    if cfg.get("schema") != SCHEMA_VERSION:
        raise ConfigError(
            f"config field 'schema' must be {SCHEMA_VERSION}, got {cfg.get('schema')!r}"
        )
    return cfg


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(repr, unknown))}")


def _field(obj: dict, key: str, kind, where: str, default=None, required=False):
    if key not in obj:
        if required:
            raise ConfigError(f"{where}: missing required field {key!r}")
        return default
    val = obj[key]
    if kind is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, kind) or isinstance(val, bool):
        raise ConfigError(
            f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {val!r}"
        )
    return val


def _model_config(section: dict, where: str = "model") -> model_mod.ModelConfig:
    _check_keys(
        section,
        {"hidden_dim", "n_layers", "n_heads", "kv_group", "vocab_size",
         "mlp_scale", "seed"},
        where,
    )
    try:
        return model_mod.ModelConfig(
            hidden_dim=_field(section, "hidden_dim", int, where, 64),
            n_layers=_field(section, "n_layers", int, where, 8),
            n_heads=_field(section, "n_heads", int, where, 8),
            kv_group=_field(section, "kv_group", int, where, 1),
            vocab_size=_field(section, "vocab_size", int, where, 256),
            mlp_scale=_field(section, "mlp_scale", float, where, 0.05),
            seed=_field(section, "seed", int, where, 0),
        )
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _policy(kind: str, bits: int, n_layers: int) -> LayerPolicy:
    if kind == "uniform":
        return LayerPolicy.uniform(bits, n_layers)
    if kind == "prefix4":
        return LayerPolicy.for_bits(bits, n_layers)
    raise ConfigError(f"layer_policy must be 'uniform' or 'prefix4', got {kind!r}")


def _max_workers() -> int:
    raw = os.environ.get("XCACHE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"XCACHE_THREADS must be an integer, got {raw!r}") from None


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "unbounded"
        return format(value, ".17g")
    return str(value)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _map_rows(fn, items):
    workers = _max_workers()
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_eval(config_path: str, out_path: str, seed_override: int | None) -> None:
    cfg = _load_config(config_path)
    where = "eval config"
    _check_keys(
        cfg,
        {"schema", "model", "variants", "bits", "layer_policy",
         "sequence_length", "decode_steps", "seed", "output"},
        where,
    )
    mcfg = _model_config(_field(cfg, "model", dict, where, {}))
    variants = _field(cfg, "variants", list, where, list(VARIANTS))
    bits_list = _field(cfg, "bits", list, where, [16])
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"{where}.variants: unknown variant {v!r}")
    for b in bits_list:
        if b not in VALID_BITS:
            raise ConfigError(f"{where}.bits: unsupported width {b!r}")
    policy_kind = _field(cfg, "layer_policy", str, where, "prefix4")
    seq_len = _field(cfg, "sequence_length", int, where, 256)
    decode_steps = _field(cfg, "decode_steps", int, where, 0)
    seed = seed_override if seed_override is not None else _field(cfg, "seed", int, where, 0)
    if seq_len < 1:
        raise ConfigError(f"{where}.sequence_length must be >= 1")
    if decode_steps < 0:
        raise ConfigError(f"{where}.decode_steps must be >= 0")

    m = model_mod.build_model(mcfg)
    tokens = (RngState(seed).next_uint64(seq_len) % mcfg.vocab_size).astype(np.int64)
    fp_generated = None
    if decode_steps:
        fp_generated = model_mod.generate(
            m, tokens[: max(1, seq_len // 2)], decode_steps, "fp16", 16
        )

    jobs = [(v, b) for v in variants for b in bits_list]

    def run(job):
        variant, bits = job
        policy = _policy(policy_kind, bits, mcfg.n_layers)
        _, rep = model_mod.forward_teacher_forced(m, tokens, variant, bits, policy)
        decode_match = ""
        if decode_steps:
            got = model_mod.generate(
                m, tokens[: max(1, seq_len // 2)], decode_steps, variant, bits, policy
            )
            matched = np.mean(got[-decode_steps:] == fp_generated[-decode_steps:])
            decode_match = float(matched)
        return [
            rep.variant,
            rep.bits,
            rep.max_logit_err,
            rep.mean_logit_err,
            rep.nll_delta,
            rep.normalized_cache_bits,
            decode_match,
        ]

    rows = _map_rows(run, jobs)
    _write_csv(
        out_path,
        ["variant", "bits", "max_logit_err", "mean_logit_err", "nll_delta",
         "normalized_kv_size", "decode_match"],
        rows,
    )


def cmd_roofline(config_path: str, out_path: str, gqa_text_bandwidth: bool) -> None:
    cfg = _load_config(config_path)
    where = "roofline config"
    _check_keys(cfg, {"schema", "hardware", "sequence_length", "variants"}, where)
    hw = _field(cfg, "hardware", dict, where, {}, required=True)
    _check_keys(hw, {"name", "peak_flops", "mem_bw"}, f"{where}.hardware")
    profile = sysmodel.HardwareProfile(
        name=_field(hw, "name", str, "hardware", "device"),
        peak_flops=_field(hw, "peak_flops", float, "hardware", required=True),
        mem_bw=_field(hw, "mem_bw", float, "hardware", required=True),
    )
    seq_len = _field(cfg, "sequence_length", int, where, 1000)
    entries = _field(cfg, "variants", list, where, required=True)

    models, policies = [], []
    for i, entry in enumerate(entries):
        ewhere = f"{where}.variants[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{ewhere}: expected an object")
        _check_keys(
            entry,
            {"variant", "hidden_dim", "kv_group", "bits", "accum_bits",
             "n_layers", "weights", "policy"},
            ewhere,
        )
        variant = _field(entry, "variant", str, ewhere, required=True)
        hidden = _field(entry, "hidden_dim", int, ewhere, required=True)
        kv_group = _field(entry, "kv_group", int, ewhere, 1)
        weights = entry.get("weights", "mha")
        if weights == "mha":
            wbytes = sysmodel.mha_weight_bytes(hidden)
        elif weights == "gqa":
            wbytes = sysmodel.gqa_weight_bytes(hidden, kv_group)
        elif isinstance(weights, (int, float)) and not isinstance(weights, bool):
            wbytes = float(weights)
        else:
            raise ConfigError(
                f"{ewhere}.weights: expected 'mha', 'gqa', or a byte count"
            )
        try:
            vm = sysmodel.VariantModel(
                variant=variant,
                hidden_dim=hidden,
                kv_group=kv_group,
                bits=_field(entry, "bits", int, ewhere, 4),
                accum_bits=_field(entry, "accum_bits", int, ewhere, 4),
                n_layers=_field(entry, "n_layers", int, ewhere, 32),
                weight_bytes_per_layer=wbytes,
            )
        except ConfigError as exc:
            raise ConfigError(f"{ewhere}: {exc}") from None
        models.append(vm)
        policies.append(
            _policy(_field(entry, "policy", str, ewhere, "uniform"), vm.bits, vm.n_layers)
        )

    rows = sysmodel.report_variants(
        profile, models, policies, seq_len, gqa_text_bandwidth
    )
    _write_csv(
        out_path,
        ["variant", "bits", "normalized_kv_size", "breakeven_length",
         "remat_flops", "bytes_moved"],
        [
            [r["variant"], r["bits"], r["normalized_kv_size"],
             r["breakeven_length"], r["remat_flops"], r["bytes_moved"]]
            for r in rows
        ],
    )


def cmd_outliers(config_path: str, out_path: str, seed_override: int | None) -> None:
    cfg = _load_config(config_path)
    where = "outliers config"
    _check_keys(
        cfg,
        {"schema", "mode", "k", "model", "sequence_length", "instances",
         "n_tokens", "hidden_dim", "latent_width", "seed"},
        where,
    )
    mode = _field(cfg, "mode", str, where, "model")
    k_list = _field(cfg, "k", list, where, [1, 2, 4, 8])
    seed = seed_override if seed_override is not None else _field(cfg, "seed", int, where, 0)
    for k in k_list:
        if not isinstance(k, int) or k < 0:
            raise ConfigError(f"{where}.k: entries must be non-negative integers")

    # Collect (scope, svd factors, w_k, activations) per layer or instance.
    cases = []
    if mode == "model":
        mcfg = _model_config(_field(cfg, "model", dict, where, {}))
        seq_len = _field(cfg, "sequence_length", int, where, 128)
        m = model_mod.build_model(mcfg)
        tokens = (RngState(seed).next_uint64(seq_len) % mcfg.vocab_size).astype(np.int64)
        xs = model_mod.layer_inputs(m, tokens)
        for i, (lw, x) in enumerate(zip(m.layers, xs)):
            cases.append((f"layer{i}", lw.svd_k, lw.w_k, x))
    elif mode in ("dominant", "failure"):
        n_instances = _field(cfg, "instances", int, where, 50)
        n_tokens = _field(cfg, "n_tokens", int, where, 64)
        hidden = _field(cfg, "hidden_dim", int, where, 48)
        latent = _field(cfg, "latent_width", int, where, 16)
        make = (
            analysis.make_dominant_instance
            if mode == "dominant"
            else analysis.make_failure_instance
        )
        for i in range(n_instances):
            w_k, x, _ = make(seed + i, n_tokens, hidden, latent)
            cases.append((f"instance{i}", svd_thin(w_k), w_k, x))
    else:
        raise ConfigError(
            f"{where}.mode must be 'model', 'dominant', or 'failure', got {mode!r}"
        )

    max_k = max(k_list) if k_list else 0
    for _, factors, _, _ in cases:
        if max_k > factors.b_t.shape[1]:
            raise ConfigError(
                f"{where}.k: {max_k} exceeds the latent width {factors.b_t.shape[1]}"
            )

    rows = []
    hits = {k: 0 for k in k_list}
    for scope, factors, w_k, x in cases:
        truth = analysis.ground_truth_channel(x, w_k)
        for k in k_list:
            pred = analysis.predict_outlier_channels(factors, k)
            correct = 1.0 if truth in pred.indices else 0.0
            hits[k] += correct
            rows.append(
                [scope, k, ";".join(map(str, pred.indices)), truth, correct]
            )
    for k in k_list:
        rows.append(["all", k, "", "", hits[k] / len(cases)])
    _write_csv(
        out_path,
        ["scope", "k", "predicted", "ground_truth", "value"],
        rows,
    )


def cmd_weights(action: str, path: str | None, config_path: str | None,
                out_path: str | None) -> None:
    if action == "save":
        if not config_path or not out_path:
            raise ConfigError("weights save needs --config and --out")
        cfg = _load_config(config_path)
        _check_keys(cfg, {"schema", "model"}, "weights config")
        mcfg = _model_config(_field(cfg, "model", dict, "weights config", {}))
        model_mod.save_weights(model_mod.build_model(mcfg), out_path)
        print(f"saved {out_path}")
        return
    if not path:
        raise ConfigError(f"weights {action} needs --path")
    if action == "load":
        m = model_mod.load_weights(path)
        print(
            f"loaded {path}: hidden_dim={m.config.hidden_dim} "
            f"n_layers={m.config.n_layers} n_heads={m.config.n_heads} "
            f"kv_group={m.config.kv_group} vocab_size={m.config.vocab_size}"
        )
        return
    if action == "inspect":
        m = model_mod.load_weights(path)
        c = m.config
        for name in ("hidden_dim", "n_layers", "n_heads", "kv_group",
                     "vocab_size", "mlp_scale", "seed"):
            print(f"{name}={getattr(c, name)}")
        return
    raise ConfigError(f"unknown weights action {action!r}")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xcache",
        description="Activation-cache engine: evaluation, roofline, and "
        "outlier-prediction reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("eval", "roofline", "outliers"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", required=True, help="CSV report path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if name == "roofline":
            p.add_argument("--eq4-text-variant", action="store_true",
                           help="charge both GQA latents in the breakeven solve")

    w = sub.add_parser("weights")
    w.add_argument("action", choices=("save", "load", "inspect"))
    w.add_argument("--path", default=None, help="weight file to read")
    w.add_argument("--config", default=None, help="JSON config (save)")
    w.add_argument("--out", default=None, help="output path (save)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            cmd_eval(args.config, args.out, args.seed)
        elif args.command == "roofline":
            cmd_roofline(args.config, args.out, args.eq4_text_variant)
        elif args.command == "outliers":
            cmd_outliers(args.config, args.out, args.seed)
        elif args.command == "weights":
            cmd_weights(args.action, args.path, args.config, args.out)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (XCacheError, Exception) as exc:  # internal invariant violations
        traceback.print_exception(exc, file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
