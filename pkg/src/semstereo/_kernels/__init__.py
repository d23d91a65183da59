"""Kernel backend selection.

The hot numeric kernels exist twice: numba-compiled loops
(``numba_backend``) and vectorised numpy (``numpy_backend``). The
``SEMSTEREO_BACKEND`` environment variable picks one at import time:

    SEMSTEREO_BACKEND=numba   force numba (ImportError if missing)
    SEMSTEREO_BACKEND=numpy   force the pure-numpy path
    unset / "auto"            numba when importable, else numpy

``benchmarks/backend_bench.py`` compares the two.
"""

from __future__ import annotations

import os

ENV_VAR = "SEMSTEREO_BACKEND"

_KERNELS = [
    "conv2d_fwd", "conv2d_bwd_x", "conv2d_bwd_w",
    "conv3d_fwd", "conv3d_bwd_x", "conv3d_bwd_w",
    "maxpool2x2_fwd", "maxpool2x2_bwd",
    "upsample_bilinear_fwd", "upsample_bilinear_bwd",
    "warp_width_fwd", "warp_width_bwd",
    "distance_volume_fwd", "distance_volume_bwd",
]


def _select():
    choice = os.environ.get(ENV_VAR, "auto").strip().lower()
    if choice in ("", "auto"):
        try:
            from . import numba_backend
            return numba_backend, "numba"
        except ImportError:
            from . import numpy_backend
            return numpy_backend, "numpy"
    if choice == "numba":
        from . import numba_backend
        return numba_backend, "numba"
    if choice == "numpy":
        from . import numpy_backend
        return numpy_backend, "numpy"
    raise ValueError(
        f"{ENV_VAR}={choice!r} not understood; use 'numba', 'numpy' or 'auto'")


_impl, BACKEND = _select()

for _name in _KERNELS:
    globals()[_name] = getattr(_impl, _name)

__all__ = _KERNELS + ["BACKEND", "ENV_VAR"]
