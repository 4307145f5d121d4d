"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``LPT_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from lpt import _kernels_py

_compiled = None
if os.environ.get("LPT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from lpt import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def backend_module(name=None):
    """Return the kernel module for ``name`` ("compiled"/"python"), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def _c(x):
    return np.ascontiguousarray(x)


def matmul(a, b):
    return _impl.matmul(_c(a), _c(b))


def sum_rows(x):
    return _impl.sum_rows(_c(x))


def conv3x3(x, w):
    return _impl.conv3x3(_c(x), _c(w))


def conv3x3_grad_input(g, w):
    return _impl.conv3x3_grad_input(_c(g), _c(w))


def conv3x3_grad_weight(x, g):
    return _impl.conv3x3_grad_weight(_c(x), _c(g))


def avgpool3x3(x):
    return _impl.avgpool3x3(_c(x))


def avgpool3x3_grad(g):
    return _impl.avgpool3x3_grad(_c(g))
