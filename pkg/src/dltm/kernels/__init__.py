"""Row-wise hot kernels with a compiled backend and a numpy fallback.

The compiled extension ``_ckernels`` is used when it imports; otherwise, or
when ``DLTM_PURE_PYTHON=1`` is set, the numpy versions are selected.
"""

import os

from . import _numpy

BACKENDS = {"numpy": _numpy}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels

if _ckernels is not None and os.environ.get("DLTM_PURE_PYTHON", "") not in ("1", "true"):
    backend = _ckernels
    BACKEND_NAME = "cython"
else:
    backend = _numpy
    BACKEND_NAME = "numpy"

__all__ = ["BACKENDS", "BACKEND_NAME", "backend"]
