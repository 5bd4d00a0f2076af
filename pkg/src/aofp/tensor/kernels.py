"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``AOFP_KERNELS=python`` forces the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("AOFP_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def compiled_available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


def use_backend(name):
    """Switch backend at runtime ("cython" or "python"); returns the previous one."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "python":
        _impl = _fallback
    elif name == "cython":
        from . import _kernels
        _impl = _kernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return prev


def im2col(xp, r, s, stride):
    return _impl.im2col(xp, r, s, stride)


def col2im(cols, hp, wp, stride):
    return _impl.col2im(cols, hp, wp, stride)


def maxpool_forward(x, k, stride):
    return _impl.maxpool_forward(x, k, stride)


def maxpool_backward(grad_out, arg, h, w, k, stride):
    return _impl.maxpool_backward(grad_out, arg, h, w, k, stride)


def sq_dist_ratio(base, other):
    return _impl.sq_dist_ratio(base, other)
