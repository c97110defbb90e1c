"""Backend selection for the row kernels.

The compiled extension is used when it imports; otherwise the NumPy
implementation is used. Set ``LATENTDIALOG_PURE_PYTHON=1`` to force the
fallback (useful for benchmarking and for debugging numerical differences).
"""

import os

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None
else:
    BACKENDS["cython"] = _kernels_c

if _kernels_c is not None and os.environ.get("LATENTDIALOG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    BACKEND = "cython"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active backend at runtime; returns the previous name."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {sorted(BACKENDS)}")
    prev = BACKEND
    BACKEND, _impl = name, BACKENDS[name]
    return prev


def layer_norm_forward(x, gain, bias, eps):
    return _impl.layer_norm_forward(x, gain, bias, eps)


def layer_norm_backward(dy, xhat, rstd, gain):
    return _impl.layer_norm_backward(dy, xhat, rstd, gain)


def softmax_forward(x):
    return _impl.softmax_forward(x)


def softmax_backward(y, dy):
    return _impl.softmax_backward(y, dy)


def log_softmax_forward(x):
    return _impl.log_softmax_forward(x)


def log_softmax_backward(out, dy):
    return _impl.log_softmax_backward(out, dy)


def merge_pair(ids, offsets, left, right, new_id):
    return _impl.merge_pair(ids, offsets, left, right, new_id)
