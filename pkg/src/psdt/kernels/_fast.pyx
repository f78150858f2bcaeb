# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the reference kernels (see reference.py for contracts).

Single-threaded on purpose: training determinism requires a fixed summation
order. Supports float32 and float64 via fused types.
"""

import numpy as np

cimport cython
from libc.math cimport exp, sqrt, tanh

BACKEND_NAME = "fast"

ctypedef fused floating:
    float
    double

cdef double _GELU_C = 0.7978845608028654
cdef double _GELU_A = 0.044715


cdef inline object _empty(floating ref, tuple shape):
    if floating is float:
        return np.empty(shape, dtype=np.float32)
    else:
        return np.empty(shape, dtype=np.float64)


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, s
    out_arr = _empty(x[0, 0], (R, n))
    cdef floating[:, ::1] out = out_arr
    for i in range(R):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            out[i, j] = <floating> exp(x[i, j] - m)
            s += out[i, j]
        for j in range(n):
            out[i, j] = <floating> (out[i, j] / s)
    return out_arr


def softmax_bwd(floating[:, ::1] dy, floating[:, ::1] y):
    cdef Py_ssize_t R = dy.shape[0], n = dy.shape[1]
    cdef Py_ssize_t i, j
    cdef double dot
    out_arr = _empty(dy[0, 0], (R, n))
    cdef floating[:, ::1] out = out_arr
    for i in range(R):
        dot = 0.0
        for j in range(n):
            dot += dy[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = <floating> (y[i, j] * (dy[i, j] - dot))
    return out_arr


def layer_norm_fwd(floating[:, ::1] x, double eps):
    cdef Py_ssize_t R = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mu, var, d, istd
    xhat_arr = _empty(x[0, 0], (R, n))
    inv_arr = _empty(x[0, 0], (R, 1))
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[:, ::1] inv = inv_arr
    for i in range(R):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        istd = 1.0 / sqrt(var + eps)
        inv[i, 0] = <floating> istd
        for j in range(n):
            xhat[i, j] = <floating> ((x[i, j] - mu) * istd)
    return xhat_arr, inv_arr


def layer_norm_bwd(floating[:, ::1] dxhat, floating[:, ::1] xhat, floating[:, ::1] inv_std):
    cdef Py_ssize_t R = dxhat.shape[0], n = dxhat.shape[1]
    cdef Py_ssize_t i, j
    cdef double m1, m2
    out_arr = _empty(dxhat[0, 0], (R, n))
    cdef floating[:, ::1] out = out_arr
    for i in range(R):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            m1 += dxhat[i, j]
            m2 += dxhat[i, j] * xhat[i, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            out[i, j] = <floating> (inv_std[i, 0] * (dxhat[i, j] - m1 - xhat[i, j] * m2))
    return out_arr


def gelu_fwd(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    cdef double xi, inner
    out_arr = _empty(x[0], (n,))
    cdef floating[::1] out = out_arr
    for i in range(n):
        xi = x[i]
        inner = _GELU_C * (xi + _GELU_A * xi * xi * xi)
        out[i] = <floating> (0.5 * xi * (1.0 + tanh(inner)))
    return out_arr


def gelu_bwd(floating[::1] dy, floating[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    cdef double xi, inner, t, dinner
    out_arr = _empty(x[0], (n,))
    cdef floating[::1] out = out_arr
    for i in range(n):
        xi = x[i]
        inner = _GELU_C * (xi + _GELU_A * xi * xi * xi)
        t = tanh(inner)
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xi * xi)
        out[i] = <floating> (dy[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * dinner))
    return out_arr


def rope_fwd(floating[:, :, ::1] x, floating[:, ::1] cos, floating[:, ::1] sin):
    cdef Py_ssize_t G = x.shape[0], T = x.shape[1], dh = x.shape[2]
    cdef Py_ssize_t half = dh // 2
    cdef Py_ssize_t g, t, p
    cdef double xe, xo, c, s
    out_arr = _empty(x[0, 0, 0], (G, T, dh))
    cdef floating[:, :, ::1] out = out_arr
    for g in range(G):
        for t in range(T):
            for p in range(half):
                xe = x[g, t, 2 * p]
                xo = x[g, t, 2 * p + 1]
                c = cos[t, p]
                s = sin[t, p]
                out[g, t, 2 * p] = <floating> (xe * c - xo * s)
                out[g, t, 2 * p + 1] = <floating> (xe * s + xo * c)
    return out_arr


def rope_bwd(floating[:, :, ::1] dy, floating[:, ::1] cos, floating[:, ::1] sin):
    cdef Py_ssize_t G = dy.shape[0], T = dy.shape[1], dh = dy.shape[2]
    cdef Py_ssize_t half = dh // 2
    cdef Py_ssize_t g, t, p
    cdef double xe, xo, c, s
    out_arr = _empty(dy[0, 0, 0], (G, T, dh))
    cdef floating[:, :, ::1] out = out_arr
    for g in range(G):
        for t in range(T):
            for p in range(half):
                xe = dy[g, t, 2 * p]
                xo = dy[g, t, 2 * p + 1]
                c = cos[t, p]
                s = sin[t, p]
                out[g, t, 2 * p] = <floating> (xe * c + xo * s)
                out[g, t, 2 * p + 1] = <floating> (-xe * s + xo * c)
    return out_arr


cdef void _softmax_rows_inplace(floating[:, ::1] x) noexcept nogil:
    cdef Py_ssize_t R = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(R):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            x[i, j] = <floating> exp(x[i, j] - m)
            s += x[i, j]
        for j in range(n):
            x[i, j] = <floating> (x[i, j] / s)


cdef void _softmax_rows_bwd_scaled(floating[:, ::1] dy, floating[:, ::1] y,
                                   double scale) noexcept nogil:
    # dy <- softmax backward through y, times scale
    cdef Py_ssize_t R = dy.shape[0], n = dy.shape[1]
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(R):
        dot = 0.0
        for j in range(n):
            dot += dy[i, j] * y[i, j]
        for j in range(n):
            dy[i, j] = <floating> (y[i, j] * (dy[i, j] - dot) * scale)


def attention_fwd(q, k, v, double scale):
    # GEMMs through BLAS; the softmax stage runs in compiled code
    cdef Py_ssize_t G = q.shape[0], T = q.shape[1]
    probs = np.matmul(q, np.swapaxes(k, -1, -2))
    probs *= probs.dtype.type(scale)
    flat = probs.reshape(G * T, T)
    if probs.dtype == np.float32:
        _softmax_rows_inplace[float](flat)
    else:
        _softmax_rows_inplace[double](flat)
    out = np.matmul(probs, v)
    return out, probs


def attention_bwd(dout, q, k, v, probs, double scale):
    cdef Py_ssize_t G = q.shape[0], T = q.shape[1]
    dscores = np.matmul(dout, np.swapaxes(v, -1, -2))
    flat = dscores.reshape(G * T, T)
    pflat = probs.reshape(G * T, T)
    if dscores.dtype == np.float32:
        _softmax_rows_bwd_scaled[float](flat, pflat, scale)
    else:
        _softmax_rows_bwd_scaled[double](flat, pflat, scale)
    dq = np.matmul(dscores, k)
    dk = np.matmul(np.swapaxes(dscores, -1, -2), q)
    dv = np.matmul(np.swapaxes(probs, -1, -2), dout)
    return dq, dk, dv


def adam_step(floating[::1] p, floating[::1] g, floating[::1] m, floating[::1] v,
              double lr, double beta1, double beta2, double eps, double bc1, double bc2):
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = <floating> mi
        v[i] = <floating> vi
        p[i] -= <floating> (lr * (mi / bc1) / (sqrt(vi / bc2) + eps))
