# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels; same contracts as ``dltm.kernels._numpy``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, erf

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out = np.empty((rows, n))
    cdef double[:, ::1] y = out
    cdef double m, s, e
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            e = exp(x[i, j] - m)
            y[i, j] = e
            s += e
        for j in range(n):
            y[i, j] = y[i, j] / s
    return out


def softmax_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    out = np.empty((rows, n))
    cdef double[:, ::1] gx = out
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(n):
            dot += gy[i, j] * y[i, j]
        for j in range(n):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def layer_norm_forward(const double[:, ::1] x, const double[::1] gamma,
                       const double[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out = np.empty((rows, n))
    xhat_arr = np.empty((rows, n))
    rstd_arr = np.empty(rows)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mean, var, d, r
    for i in range(rows):
        mean = 0.0
        for j in range(n):
            mean += x[i, j]
        mean = mean / n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mean
            var += d * d
        var = var / n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            d = (x[i, j] - mean) * r
            xhat[i, j] = d
            y[i, j] = d * gamma[j] + beta[j]
    return out, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t rows = gy.shape[0], n = gy.shape[1], i, j
    gx_arr = np.empty((rows, n))
    dgamma_arr = np.zeros(n)
    dbeta_arr = np.zeros(n)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double m1, m2, g
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            g = gy[i, j] * gamma[j]
            m1 += g
            m2 += g * xhat[i, j]
            dgamma[j] += gy[i, j] * xhat[i, j]
            dbeta[j] += gy[i, j]
        m1 = m1 / n
        m2 = m2 / n
        for j in range(n):
            gx[i, j] = rstd[i] * (gy[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
    return gx_arr, dgamma_arr, dbeta_arr


def gelu_forward(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out = np.empty((rows, n))
    cdef double[:, ::1] y = out
    cdef double v
    for i in range(rows):
        for j in range(n):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + erf(v * INV_SQRT2))
    return out


def gelu_backward(const double[:, ::1] x, const double[:, ::1] gy):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out = np.empty((rows, n))
    cdef double[:, ::1] gx = out
    cdef double v
    for i in range(rows):
        for j in range(n):
            v = x[i, j]
            gx[i, j] = gy[i, j] * (0.5 * (1.0 + erf(v * INV_SQRT2))
                                   + v * INV_SQRT_2PI * exp(-0.5 * v * v))
    return out


def max_pool_forward(const double[:, ::1] x, Py_ssize_t k):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], m = n // k, i, w, j, best
    out = np.empty((rows, m))
    arg_arr = np.empty((rows, m), dtype=np.int64)
    cdef double[:, ::1] y = out
    cdef cnp.int64_t[:, ::1] arg = arg_arr
    for i in range(rows):
        for w in range(m):
            best = w * k
            for j in range(w * k + 1, (w + 1) * k):
                if x[i, j] > x[i, best]:
                    best = j
            y[i, w] = x[i, best]
            arg[i, w] = best
    return out, arg_arr


def max_pool_backward(const double[:, ::1] gy, const cnp.int64_t[:, ::1] arg, Py_ssize_t n):
    cdef Py_ssize_t rows = gy.shape[0], m = gy.shape[1], i, w
    out = np.zeros((rows, n))
    cdef double[:, ::1] gx = out
    for i in range(rows):
        for w in range(m):
            gx[i, arg[i, w]] += gy[i, w]
    return out
