"""Kernel backend selection.

Uses the compiled ``_ckernels`` extension when it was built, else the numpy
fallback. Set ``GRIDTOPO_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"

if not os.environ.get("GRIDTOPO_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

EARTH_RADIUS_M = _pykernels.EARTH_RADIUS_M

haversine_matrix = _impl.haversine_matrix
pearson_pair = _impl.pearson_pair
pearson_matrix = _impl.pearson_matrix
hist_entropy = _impl.hist_entropy
hist_mi = _impl.hist_mi
lloyd_assign = _impl.lloyd_assign


def backends():
    """Available implementations keyed by name, for tests and benchmarks."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
