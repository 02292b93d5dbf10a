"""xcache: quantized activation-cache engine with on-the-fly KV
rematerialization, an analytical roofline model, and memory accounting.

Subpackages follow the processing chain: ``linalg`` (dense kernels),
``quant`` (grouped quantization), ``cache`` (per-layer cache backends),
``model`` (desk-scale transformer harness), ``sysmodel`` (performance and
footprint model), ``analysis`` (latent outlier-channel prediction), and
``cli`` (the ``xcache`` command).
"""

__version__ = "0.1.0"

from xcache._kernels import backend as kernel_backend

__all__ = ["kernel_backend", "__version__"]
