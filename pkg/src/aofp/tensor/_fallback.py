"""Pure-numpy versions of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, r, s, stride):
    """Gather (N, Ho, Wo, r, s, C) patches from an already padded NHWC batch."""
    n, hp, wp, c = xp.shape
    ho = (hp - r) // stride + 1
    wo = (wp - s) // stride + 1
    win = sliding_window_view(xp, (r, s), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, Ho, Wo, C, r, s) -> (N, Ho, Wo, r, s, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def col2im(cols, hp, wp, stride):
    """Scatter-add patch gradients back onto a padded NHWC buffer."""
    n, ho, wo, r, s, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for a in range(r):
        for b in range(s):
            out[:, a : a + stride * (ho - 1) + 1 : stride,
                b : b + stride * (wo - 1) + 1 : stride, :] += cols[:, :, :, a, b, :]
    return out


def maxpool_forward(x, k, stride):
    """Return the pooled map and the flat in-window argmax of each output."""
    n, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    win = win.reshape(n, ho, wo, c, k * k)
    arg = win.argmax(axis=-1).astype(np.int32)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward(grad_out, arg, h, w, k, stride):
    n, ho, wo, c = grad_out.shape
    out = np.zeros((n, h, w, c), dtype=grad_out.dtype)
    da = arg // k
    db = arg % k
    ii = np.arange(ho)[None, :, None, None] * stride + da
    jj = np.arange(wo)[None, None, :, None] * stride + db
    nn = np.broadcast_to(np.arange(n)[:, None, None, None], arg.shape)
    cc = np.broadcast_to(np.arange(c)[None, None, None, :], arg.shape)
    np.add.at(out, (nn, ii, jj, cc), grad_out)
    return out


def sq_dist_ratio(base, other):
    """||base - other||^2 and ||base||^2, both accumulated in float64."""
    b = base.ravel().astype(np.float64)
    d = b - other.ravel().astype(np.float64)
    return float(d @ d), float(b @ b)
