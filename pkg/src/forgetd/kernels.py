"""Backend selection for the convolution/pooling kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. Set ``FORGETD_PURE_PYTHON=1`` to force the
fallback. Both backends agree to rounding, not bitwise, so a run is only
reproducible byte-for-byte on the same backend.
"""

import os

import numpy as np

from forgetd import _pykernels

try:
    from forgetd import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = ("compiled", "python") if _compiled is not None else ("python",)

_impl = _pykernels
BACKEND = "python"


def use_backend(name):
    """Switch the active backend (``"compiled"`` or ``"python"``)."""
    global _impl, BACKEND
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available; build the extension first")
        _impl = _compiled
    elif name == "python":
        _impl = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


if _compiled is not None and os.environ.get("FORGETD_PURE_PYTHON", "") in ("", "0"):
    use_backend("compiled")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, b, stride):
    return _impl.conv2d_forward(_c(x), _c(w), _c(b), int(stride))


def conv2d_backward(x, w, dout, stride):
    return _impl.conv2d_backward(_c(x), _c(w), _c(dout), int(stride))


def maxpool2d_forward(x, window):
    return _impl.maxpool2d_forward(_c(x), int(window))


def maxpool2d_backward(dout, arg, input_shape, window):
    arg = np.ascontiguousarray(arg, dtype=np.int64)
    return _impl.maxpool2d_backward(_c(dout), arg, tuple(int(s) for s in input_shape), int(window))
