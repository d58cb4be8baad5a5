"""Backend selection for the circular conv2d kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Set ``MNMMOL_BACKEND=python`` to force the fallback.
"""
import os

import numpy as np

from . import _conv_py

try:
    from . import _conv_ext
except ImportError:  # extension not built
    _conv_ext = None

_BACKENDS = {"python": _conv_py}
if _conv_ext is not None:
    _BACKENDS["cython"] = _conv_ext


def available_backends():
    return sorted(_BACKENDS)


def _pick():
    want = os.environ.get("MNMMOL_BACKEND")
    if want:
        if want not in _BACKENDS:
            raise ImportError(f"conv backend {want!r} not available; have {available_backends()}")
        return want
    return "cython" if "cython" in _BACKENDS else "python"


BACKEND = _pick()
_impl = _BACKENDS[BACKEND]


def get_backend(name):
    """Return the kernel module registered under ``name``."""
    return _BACKENDS[name]


def set_backend(name):
    global BACKEND, _impl
    _impl = get_backend(name)
    BACKEND = name


def conv2d_forward(x, w, bias):
    return _impl.conv2d_forward(np.ascontiguousarray(x, dtype=np.float64),
                                np.ascontiguousarray(w, dtype=np.float64),
                                np.ascontiguousarray(bias, dtype=np.float64))


def conv2d_grad_input(gy, w):
    return _impl.conv2d_grad_input(np.ascontiguousarray(gy, dtype=np.float64),
                                   np.ascontiguousarray(w, dtype=np.float64))


def conv2d_grad_weight(gy, x, k):
    return _impl.conv2d_grad_weight(np.ascontiguousarray(gy, dtype=np.float64),
                                    np.ascontiguousarray(x, dtype=np.float64), int(k))
