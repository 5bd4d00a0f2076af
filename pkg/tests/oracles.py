"""Independent reference implementations used by the tests.

Nothing here imports the code under test beyond plain data containers.
"""
import numpy as np


def conv_loops(x, kernel, bias, stride=1, padding=0):
    """Direct nested-loop cross-correlation of one (H, W, C) map."""
    h, w, cin = x.shape
    r, s, _, cout = kernel.shape
    xp = np.zeros((h + 2 * padding, w + 2 * padding, cin), dtype=np.float64)
    xp[padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - r) // stride + 1
    wo = (w + 2 * padding - s) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = float(bias[o])
                for a in range(r):
                    for b in range(s):
                        for k in range(cin):
                            acc += xp[i * stride + a, j * stride + b, k] * kernel[a, b, k, o]
                out[i, j, o] = acc
    return out


def numeric_grad(f, x, step=1e-4):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        fp = f()
        x[idx] = old - step
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def damage_sum(base, scored):
    """Isolated damage by explicit elementwise summation."""
    num = 0.0
    den = 0.0
    for b, s in zip(np.ravel(base).tolist(), np.ravel(scored).tolist()):
        num += (b - s) ** 2
        den += b * b
    return num / den
