"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``NEURALBP_PURE_PYTHON=1`` to force the numpy path.  ``BACKEND`` names
the implementation in use.
"""
import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "numpy"
if os.environ.get("NEURALBP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        pass


def use_backend(name):
    """Switch implementation at runtime ("cython" or "numpy"); returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "numpy":
        _impl, BACKEND = _kernels_py, "numpy"
    elif name == "cython":
        from . import _ckernels
        _impl, BACKEND = _ckernels, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def loo_product(values, seg, init=None):
    return _impl.loo_product(_c(values), seg.ptr, seg.order, seg.padded,
                             None if init is None else _c(init))


def segment_product(values, seg, init):
    return _impl.segment_product(_c(values), seg.ptr, seg.order, seg.padded, _c(init))


def parity_loo(p1, seg, out):
    return _impl.parity_loo(_c(p1), seg.ptr, seg.order, seg.padded, out)


def segment_sum(values, seg):
    values = _c(values)
    flat = values.reshape(len(values), -1)
    out = _impl.segment_sum(flat, seg.ptr, seg.order, seg.padded)
    return out.reshape((seg.num_segments,) + values.shape[1:])
