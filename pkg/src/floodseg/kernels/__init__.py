"""Backend selection for the hot kernels.

The compiled Cython core is preferred when importable; otherwise the
vectorized numpy fallback is used. Set FLOODSEG_PURE=1 to force the
fallback (useful for benchmarking and debugging).
"""

import os

from . import numpy_backend

if os.environ.get("FLOODSEG_PURE"):
    backend = numpy_backend
else:
    try:
        from . import _core as backend
    except ImportError:
        backend = numpy_backend

BACKEND_NAME = backend.NAME

conv2d_fwd = backend.conv2d_fwd
conv2d_bwd = backend.conv2d_bwd
conv2d_transpose_fwd = backend.conv2d_transpose_fwd
conv2d_transpose_bwd = backend.conv2d_transpose_bwd
max_pool2_fwd = backend.max_pool2_fwd
max_pool2_bwd = backend.max_pool2_bwd
avg_pool2_fwd = backend.avg_pool2_fwd
avg_pool2_bwd = backend.avg_pool2_bwd


def available_backends():
    """All importable backend modules, compiled first."""
    out = []
    try:
        from . import _core

        out.append(_core)
    except ImportError:
        pass
    out.append(numpy_backend)
    return out
