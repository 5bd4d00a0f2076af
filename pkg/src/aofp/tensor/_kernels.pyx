# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: patch gather/scatter, max pooling, damage reduction.

Mirrors ``_fallback`` exactly, including argmax tie-breaking (first maximum).
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int r, int s, int stride):
    cdef Py_ssize_t n = xp.shape[0], hp = xp.shape[1], wp = xp.shape[2], c = xp.shape[3]
    cdef Py_ssize_t ho = (hp - r) // stride + 1
    cdef Py_ssize_t wo = (wp - s) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, ho, wo, r, s, c), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, a, bb, k, y, x
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for a in range(r):
                        y = i * stride + a
                        for bb in range(s):
                            x = j * stride + bb
                            for k in range(c):
                                out[b, i, j, a, bb, k] = xp[b, y, x, k]
    return out_arr


def col2im(real[:, :, :, :, :, ::1] cols, int hp, int wp, int stride):
    cdef Py_ssize_t n = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t r = cols.shape[3], s = cols.shape[4], c = cols.shape[5]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, hp, wp, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, a, bb, k, y, x
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for a in range(r):
                        y = i * stride + a
                        for bb in range(s):
                            x = j * stride + bb
                            for k in range(c):
                                out[b, y, x, k] += cols[b, i, j, a, bb, k]
    return out_arr


def maxpool_forward(real[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, ho, wo, c), dtype=dtype)
    arg_arr = np.empty((n, ho, wo, c), dtype=np.int32)
    cdef real[:, :, :, ::1] out = out_arr
    cdef int[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, i, j, ch, a, bb
    cdef real best, v
    cdef int besti
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        best = x[b, i * stride, j * stride, ch]
                        besti = 0
                        for a in range(k):
                            for bb in range(k):
                                v = x[b, i * stride + a, j * stride + bb, ch]
                                if v > best:
                                    best = v
                                    besti = <int>(a * k + bb)
                        out[b, i, j, ch] = best
                        arg[b, i, j, ch] = besti
    return out_arr, arg_arr


def maxpool_backward(real[:, :, :, ::1] grad_out, int[:, :, :, ::1] arg,
                     int h, int w, int k, int stride):
    cdef Py_ssize_t n = grad_out.shape[0], ho = grad_out.shape[1]
    cdef Py_ssize_t wo = grad_out.shape[2], c = grad_out.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, ch
    cdef int idx
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        idx = arg[b, i, j, ch]
                        out[b, i * stride + idx // k, j * stride + idx % k, ch] += grad_out[b, i, j, ch]
    return out_arr


def sq_dist_ratio(base, other):
    cdef const float[::1] bf
    cdef const float[::1] of
    cdef const double[::1] bd
    cdef const double[::1] od
    cdef Py_ssize_t i, m
    cdef double num = 0.0, den = 0.0, d, bv
    base = np.ascontiguousarray(base).ravel()
    other = np.ascontiguousarray(other, dtype=base.dtype).ravel()
    m = base.shape[0]
    if base.dtype == np.float32:
        bf = base
        of = other
        with nogil:
            for i in range(m):
                bv = bf[i]
                d = bv - <double>of[i]
                num += d * d
                den += bv * bv
    else:
        bd = np.asarray(base, dtype=np.float64)
        od = np.asarray(other, dtype=np.float64)
        with nogil:
            for i in range(m):
                bv = bd[i]
                d = bv - od[i]
                num += d * d
                den += bv * bv
    return num, den
