"""Backend selection for the convolution loops.

The compiled extension is used when importable. Setting the environment
variable ``GEXMAP_PURE_PYTHON=1`` before import forces the numpy fallback.
"""

import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

if _compiled is not None and not os.environ.get("GEXMAP_PURE_PYTHON"):
    _impl = _compiled
    BACKEND = "cython"
else:
    _impl = _kernels_py
    BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
dw_forward = _impl.dw_forward
dw_backward = _impl.dw_backward


def available_backends():
    """Map backend name to kernel module for every backend importable here."""
    found = {"python": _kernels_py}
    if _compiled is not None:
        found["cython"] = _compiled
    return found
