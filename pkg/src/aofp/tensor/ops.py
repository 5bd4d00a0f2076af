"""Layer primitives on channel-last arrays.

Feature maps are ``(N, H, W, C)`` arrays; a single ``(H, W, C)`` map is
accepted wherever a batch is and the batch axis is dropped again on return.
Arithmetic follows the input dtype (float32 for models, float64 for
gradient checks); reductions accumulate in float64.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Operand shapes do not fit together."""


@dataclass
class ConvParams:
    kernel: np.ndarray  # r x s x c_in x c_out
    bias: np.ndarray  # c_out
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got shape {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match kernel out channels {self.kernel.shape[3]}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPS

    def __post_init__(self):
        n = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == n):
            raise ShapeError("BN vectors must share one length")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @property
    def channels(self):
        return self.gamma.shape[0]


def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected a rank 3 or 4 feature map, got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------
# convolution


def conv_output_hw(h, w, r, s, stride, padding):
    return (h + 2 * padding - r) // stride + 1, (w + 2 * padding - s) // stride + 1


def _pad(x, padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def conv2d_forward_cached(x, p):
    """Batched cross-correlation; also returns the patch matrix for backward."""
    r, s, cin, cout = p.kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    n, h, w, _ = x.shape
    ho, wo = conv_output_hw(h, w, r, s, p.stride, p.padding)
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    cols = kernels.im2col(_pad(x, p.padding), r, s, p.stride)
    flat = cols.reshape(n * ho * wo, r * s * cin)
    y = flat @ p.kernel.reshape(r * s * cin, cout).astype(x.dtype, copy=False)
    y += p.bias.astype(x.dtype, copy=False)
    return y.reshape(n, ho, wo, cout), cols


def conv2d_backward_cached(x_shape, cols, p, grad_out):
    r, s, cin, cout = p.kernel.shape
    n, h, w, _ = x_shape
    ho, wo = grad_out.shape[1:3]
    g = grad_out.reshape(n * ho * wo, cout)
    flat = cols.reshape(n * ho * wo, r * s * cin)
    grad_kernel = (flat.T @ g).reshape(r, s, cin, cout)
    grad_bias = g.sum(axis=0, dtype=np.float64).astype(grad_out.dtype)
    dcols = (g @ p.kernel.reshape(r * s * cin, cout).T.astype(g.dtype, copy=False))
    dcols = np.ascontiguousarray(dcols.reshape(n, ho, wo, r, s, cin))
    pad = p.padding
    dxp = kernels.col2im(dcols, h + 2 * pad, w + 2 * pad, p.stride)
    grad_input = dxp[:, pad : pad + h, pad : pad + w, :] if pad else dxp
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


def conv2d_forward(x, p):
    """Output channel j = sum_k x_k (cross-correlated with) K[:, :, k, j] + b_j.

    No activation is applied here.
    """
    xb, single = _batched(x)
    y, _ = conv2d_forward_cached(xb, p)
    return y[0] if single else y


def conv2d_backward(x, p, grad_out):
    """Gradients of sum(grad_out * conv2d_forward(x, p)) w.r.t. input, kernel, bias."""
    xb, single = _batched(x)
    gb, _ = _batched(grad_out)
    r, s, cin, _ = p.kernel.shape
    if xb.shape[-1] != cin:
        raise ShapeError(f"input has {xb.shape[-1]} channels, kernel expects {cin}")
    ho, wo = conv_output_hw(xb.shape[1], xb.shape[2], r, s, p.stride, p.padding)
    if gb.shape != (xb.shape[0], ho, wo, p.kernel.shape[3]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output")
    cols = kernels.im2col(_pad(xb, p.padding), r, s, p.stride)
    gx, gk, gbias = conv2d_backward_cached(xb.shape, cols, p, gb)
    return (gx[0] if single else gx), gk, gbias


# --------------------------------------------------------------------------
# batch normalization


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    batch_stats: bool  # True when mean/var came from this batch (gradient flows through them)
    mean: np.ndarray
    var: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


def batchnorm_forward(x, p, mode="train", stats_override=None):
    """Normalize per channel; returns ``(y, cache)``.

    In train mode without ``stats_override`` the batch statistics are used and
    ``cache.running_mean``/``running_var`` hold the EMA-updated values. With
    ``stats_override=(mean, var)`` those are used instead and running stats
    are left alone. Eval mode uses the running stats.
    """
    if x.shape[-1] != p.channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, BN has {p.channels}")
    axes = tuple(range(x.ndim - 1))
    running_mean, running_var = p.running_mean, p.running_var
    batch_stats = False
    if stats_override is not None:
        mean, var = (np.asarray(v, dtype=np.float64) for v in stats_override)
    elif mode == "train":
        mean = x.mean(axis=axes, dtype=np.float64)
        var = np.square(x - mean.astype(x.dtype)).mean(axis=axes, dtype=np.float64)
        m = x.size // x.shape[-1]
        unbiased = var * m / max(m - 1, 1)
        running_mean = (BN_MOMENTUM * p.running_mean + (1 - BN_MOMENTUM) * mean).astype(p.running_mean.dtype)
        running_var = (BN_MOMENTUM * p.running_var + (1 - BN_MOMENTUM) * unbiased).astype(p.running_var.dtype)
        batch_stats = True
    elif mode == "eval":
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown BN mode {mode!r}")
    if np.any(var < 0):
        raise ValueError("variance below zero")
    inv_std = (1.0 / np.sqrt(var + p.epsilon)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)) * inv_std
    y = xhat * p.gamma.astype(x.dtype) + p.beta.astype(x.dtype)
    return y, BNCache(xhat, inv_std, batch_stats, mean, var, running_mean, running_var)


def batchnorm_backward(grad_out, cache, gamma):
    """Returns (grad_input, grad_gamma, grad_beta)."""
    axes = tuple(range(grad_out.ndim - 1))
    dt = grad_out.dtype
    grad_beta = grad_out.sum(axis=axes, dtype=np.float64).astype(dt)
    grad_gamma = (grad_out * cache.xhat).sum(axis=axes, dtype=np.float64).astype(dt)
    dxhat = grad_out * gamma.astype(dt)
    if not cache.batch_stats:
        return dxhat * cache.inv_std, grad_gamma, grad_beta
    mean_d = dxhat.mean(axis=axes, dtype=np.float64).astype(dt)
    mean_dx = (dxhat * cache.xhat).mean(axis=axes, dtype=np.float64).astype(dt)
    grad_input = cache.inv_std * (dxhat - mean_d - cache.xhat * mean_dx)
    return grad_input, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# elementwise, pooling, dense, loss


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def maxpool2d_forward(x, k=2, stride=None):
    """Returns (pooled, argmax) where argmax indexes the k*k window row-major."""
    stride = k if stride is None else stride
    xb, single = _batched(x)
    if xb.shape[1] < k or xb.shape[2] < k:
        raise ShapeError("pool window larger than input")
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(xb), k, stride)
    return (out[0], arg[0]) if single else (out, arg)


def maxpool2d_backward(x_shape, arg, grad_out, k=2, stride=None):
    stride = k if stride is None else stride
    single = len(x_shape) == 3
    gb = grad_out[None] if single else grad_out
    ab = arg[None] if single else arg
    h, w = x_shape[-3], x_shape[-2]
    gx = kernels.maxpool_backward(np.ascontiguousarray(gb), np.ascontiguousarray(ab, dtype=np.int32),
                                  h, w, k, stride)
    return gx[0] if single else gx


def global_avgpool_forward(x):
    return x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)


def global_avgpool_backward(x_shape, grad_out):
    n, h, w, c = x_shape
    g = grad_out / (h * w)
    return np.ascontiguousarray(np.broadcast_to(g[:, None, None, :], x_shape))


def fc_forward(x, weight, bias):
    """x: (N, c_in), weight: (c_in, c_out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"fc input has {x.shape[-1]} features, weight expects {weight.shape[0]}")
    return x @ weight.astype(x.dtype, copy=False) + bias.astype(x.dtype, copy=False)


def fc_backward(x, weight, grad_out):
    grad_input = grad_out @ weight.T.astype(grad_out.dtype, copy=False)
    grad_weight = x.T @ grad_out
    grad_bias = grad_out.sum(axis=0, dtype=np.float64).astype(grad_out.dtype)
    return grad_input, grad_weight, grad_bias


def softmax_xent(logits, labels):
    """Mean cross-entropy and per-example losses (float64)."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range for {k} classes")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    per = logsum - z[np.arange(len(labels)), labels]
    return float(per.mean()), per


def softmax_xent_backward(logits, labels):
    """Gradient of the mean cross-entropy w.r.t. logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=1, keepdims=True)
    prob[np.arange(len(labels)), labels] -= 1.0
    return (prob / len(labels)).astype(logits.dtype)
