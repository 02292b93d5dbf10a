"""Benchmark the compiled kernel lane against the NumPy fallback.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--quick]

Each kernel runs on a representative hot-path workload; the table reports
the best-of-N wall time per lane and the speedup. The script also
cross-checks that both lanes produce identical integer outputs before
timing them.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from xcache._kernels import fallback

try:
    from xcache._kernels import _native
except ImportError:
    _native = None


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def workloads(quick: bool):
    rng = np.random.default_rng(0)
    n_draws = 200_000 if quick else 1_000_000
    n_codes = 200_000 if quick else 2_000_000
    rows, cols = (256, 1024) if quick else (1024, 4096)
    codes4 = rng.integers(0, 16, n_codes).astype(np.uint8)
    codes3 = rng.integers(0, 8, n_codes).astype(np.uint8)
    x = rng.normal(size=(rows, cols))
    jac = rng.normal(size=(32, 128))  # columns-as-rows layout

    def bench_rng(mod):
        state = mod.seed_state(42)
        return lambda: mod.rng_fill(state, n_draws)

    def bench_pack(mod, codes, bits):
        return lambda: mod.unpack_codes(
            mod.pack_codes(codes, bits), bits, codes.shape[0]
        )

    def bench_quant(mod):
        return lambda: mod.quantize_groups(x, 128, 4)

    def bench_dequant(mod):
        c, s, z = mod.quantize_groups(x, 128, 4)
        return lambda: mod.dequantize_groups(c, s, z, 128)

    def bench_jacobi(mod):
        def run():
            a = jac.copy()
            v = np.eye(32)
            for _ in range(8):
                if mod.jacobi_sweep(a, v, 1e-12) <= 1e-12:
                    break
        return run

    return [
        (f"rng_fill ({n_draws:,} draws)", bench_rng),
        (f"pack+unpack 4-bit ({n_codes:,} codes)",
         lambda mod: bench_pack(mod, codes4, 4)),
        (f"pack+unpack 3-bit ({n_codes:,} codes)",
         lambda mod: bench_pack(mod, codes3, 3)),
        (f"quantize_groups ({rows}x{cols}, 4-bit, G=128)", bench_quant),
        (f"dequantize_groups ({rows}x{cols})", bench_dequant),
        ("jacobi sweeps to convergence (128x32)", bench_jacobi),
    ]


def crosscheck() -> None:
    rng = np.random.default_rng(1)
    state_f = fallback.seed_state(7)
    state_n = _native.seed_state(7)
    assert np.array_equal(fallback.rng_fill(state_f, 999),
                          _native.rng_fill(state_n, 999))
    codes = rng.integers(0, 8, 4097).astype(np.uint8)
    assert np.array_equal(fallback.pack_codes(codes, 3),
                          _native.pack_codes(codes, 3))
    x = rng.normal(size=(64, 300))
    for a, b in zip(fallback.quantize_groups(x, 128, 4),
                    _native.quantize_groups(x, 128, 4)):
        assert np.array_equal(a, b)
    print("cross-check OK: lanes agree\n")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--quick", action="store_true",
                        help="smaller workloads (CI-sized)")
    args = parser.parse_args()

    if _native is None:
        print("compiled lane not built; timing the NumPy fallback only\n")
    else:
        crosscheck()

    name_w = 46
    print(f"{'kernel':<{name_w}} {'fallback':>12} {'native':>12} {'speedup':>9}")
    print("-" * (name_w + 36))
    for name, make in workloads(args.quick):
        t_fb = best_of(make(fallback), args.repeats)
        if _native is None:
            print(f"{name:<{name_w}} {t_fb * 1e3:>10.2f}ms {'-':>12} {'-':>9}")
            continue
        t_nat = best_of(make(_native), args.repeats)
        print(f"{name:<{name_w}} {t_fb * 1e3:>10.2f}ms "
              f"{t_nat * 1e3:>10.2f}ms {t_fb / t_nat:>8.1f}x")


if __name__ == "__main__":
    main()
