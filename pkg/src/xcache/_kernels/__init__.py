"""Kernel lane selection.

The compiled extension is preferred when built; otherwise the NumPy lane is
used. Set ``XCACHE_PURE_PYTHON=1`` to force the fallback (used by the
benchmark and the lane-equivalence tests).
"""

import os

from xcache._kernels import fallback as _fallback

if os.environ.get("XCACHE_PURE_PYTHON"):
    _impl = _fallback
else:
    try:
        from xcache._kernels import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _fallback

seed_state = _impl.seed_state
rng_fill = _impl.rng_fill
pack_codes = _impl.pack_codes
unpack_codes = _impl.unpack_codes
quantize_groups = _impl.quantize_groups
dequantize_groups = _impl.dequantize_groups
jacobi_sweep = _impl.jacobi_sweep


def backend() -> str:
    """Name of the active lane: ``"native"`` or ``"fallback"``."""
    return "fallback" if _impl is _fallback else "native"
