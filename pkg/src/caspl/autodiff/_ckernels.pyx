# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise kernels; same surface as ``_pykernels``."""
import numpy as np
from libc.math cimport exp, log, sqrt, tanh

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_rows(const double[:, ::1] x, double inv_tau):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] y = out
    cdef double mx, s, v
    for i in range(n):
        mx = x[i, 0] * inv_tau
        for j in range(1, m):
            v = x[i, j] * inv_tau
            if v > mx:
                mx = v
        s = 0.0
        for j in range(m):
            v = exp(x[i, j] * inv_tau - mx)
            y[i, j] = v
            s += v
        for j in range(m):
            y[i, j] /= s
    return out


def softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] g, double inv_tau):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] dx = out
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += g[i, j] * y[i, j]
        for j in range(m):
            dx[i, j] = inv_tau * y[i, j] * (g[i, j] - s)
    return out


def log_softmax_rows(const double[:, ::1] x, double inv_tau):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] y = out
    cdef double mx, s, v
    for i in range(n):
        mx = x[i, 0] * inv_tau
        for j in range(1, m):
            v = x[i, j] * inv_tau
            if v > mx:
                mx = v
        s = 0.0
        for j in range(m):
            v = x[i, j] * inv_tau - mx
            y[i, j] = v
            s += exp(v)
        s = log(s)
        for j in range(m):
            y[i, j] -= s
    return out


def log_softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] g, double inv_tau):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] dx = out
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += g[i, j]
        for j in range(m):
            dx[i, j] = inv_tau * (g[i, j] - exp(y[i, j]) * s)
    return out


def layer_norm_rows(const double[:, ::1] x, const double[::1] gamma,
                    const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    xh = np.empty((n, m))
    rs = np.empty(n)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xh
    cdef double[::1] rstd = rs
    cdef double mu, var, d, r
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var /= m
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            d = (x[i, j] - mu) * r
            xhat[i, j] = d
            y[i, j] = d * gamma[j] + beta[j]
    return out, xh, rs


def layer_norm_rows_backward(const double[:, ::1] g, const double[:, ::1] xhat,
                             const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1], i, j
    out = np.empty((n, m))
    dga = np.zeros(m)
    dbe = np.zeros(m)
    cdef double[:, ::1] dx = out
    cdef double[::1] dgamma = dga
    cdef double[::1] dbeta = dbe
    cdef double s1, s2, gx
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            gx = g[i, j] * gamma[j]
            s1 += gx
            s2 += gx * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        s1 /= m
        s2 /= m
        for j in range(m):
            dx[i, j] = (g[i, j] * gamma[j] - s1 - xhat[i, j] * s2) * rstd[i]
    return out, dga, dbe


def gelu(x):
    """Return ``(y, t)``; ``t`` is the tanh term reused by the backward pass."""
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    tt = np.empty_like(flat)
    cdef const double[::1] xv = flat
    cdef double[::1] y = out
    cdef double[::1] t = tt
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v, th
    for i in range(n):
        v = xv[i]
        th = 1.0 - 2.0 / (exp(2.0 * GELU_C * (v + GELU_A * v * v * v)) + 1.0)
        t[i] = th
        y[i] = 0.5 * v * (1.0 + th)
    return out.reshape(np.shape(x)), tt.reshape(np.shape(x))


def gelu_backward(x, t, g):
    flat = np.ascontiguousarray(x).reshape(-1)
    tflat = np.ascontiguousarray(t).reshape(-1)
    gflat = np.ascontiguousarray(g).reshape(-1)
    out = np.empty_like(flat)
    cdef const double[::1] xv = flat
    cdef const double[::1] tv = tflat
    cdef const double[::1] gv = gflat
    cdef double[::1] dx = out
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v, th
    for i in range(n):
        v = xv[i]
        th = tv[i]
        dx[i] = gv[i] * (0.5 * (1.0 + th)
                         + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v))
    return out.reshape(np.shape(x))
