"""Backend selection for the grid kernels.

The compiled extension is used when it was built; otherwise (or when
``HJSHIELD_PURE_PYTHON=1`` is set) the numpy implementations are used.
"""

import os

from . import _kernels_py

BACKEND = "python"
lf_sweep = _kernels_py.lf_sweep
trilinear = _kernels_py.trilinear

if os.environ.get("HJSHIELD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        BACKEND = "cython"
        lf_sweep = _compiled.lf_sweep
        trilinear = _compiled.trilinear

__all__ = ["BACKEND", "lf_sweep", "trilinear"]
