"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``CPM_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CPM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

se3_exp = _impl.se3_exp
se3_log = _impl.se3_log
min_pair_distance = _impl.min_pair_distance

__all__ = ["BACKEND", "se3_exp", "se3_log", "min_pair_distance"]
