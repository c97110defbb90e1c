# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels; same contract as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, log, expf, sqrtf, logf

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline real _exp(real x) noexcept nogil:
    if real is float:
        return expf(x)
    else:
        return exp(x)


cdef inline real _sqrt(real x) noexcept nogil:
    if real is float:
        return sqrtf(x)
    else:
        return sqrt(x)


cdef inline real _log(real x) noexcept nogil:
    if real is float:
        return logf(x)
    else:
        return log(x)


def layer_norm_forward(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef real mu, var, r, c
    with nogil:
        for i in range(n):
            mu = 0
            for j in range(d):
                mu = mu + x[i, j]
            mu = mu / d
            var = 0
            for j in range(d):
                c = x[i, j] - mu
                var = var + c * c
            var = var / d
            r = 1 / _sqrt(var + <real>eps)
            rstd[i] = r
            for j in range(d):
                c = (x[i, j] - mu) * r
                xhat[i, j] = c
                y[i, j] = c * gain[j] + bias[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd, real[::1] gain):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dgain_arr = np.zeros(d, dtype=dtype)
    dbias_arr = np.zeros(d, dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef real[::1] dgain = dgain_arr
    cdef real[::1] dbias = dbias_arr
    cdef real m1, m2, g
    with nogil:
        for i in range(n):
            m1 = 0
            m2 = 0
            for j in range(d):
                g = dy[i, j] * gain[j]
                m1 = m1 + g
                m2 = m2 + g * xhat[i, j]
                dgain[j] = dgain[j] + dy[i, j] * xhat[i, j]
                dbias[j] = dbias[j] + dy[i, j]
            m1 = m1 / d
            m2 = m2 / d
            for j in range(d):
                dx[i, j] = (dy[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return dx_arr, dgain_arr, dbias_arr


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real m, s, e
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0
            for j in range(d):
                e = _exp(x[i, j] - m)
                y[i, j] = e
                s = s + e
            for j in range(d):
                y[i, j] = y[i, j] / s
    return y_arr


def softmax_backward(real[:, ::1] y, real[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef real s
    with nogil:
        for i in range(n):
            s = 0
            for j in range(d):
                s = s + dy[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (dy[i, j] - s)
    return dx_arr


def log_softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real m, s
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0
            for j in range(d):
                s = s + _exp(x[i, j] - m)
            s = _log(s)
            for j in range(d):
                y[i, j] = x[i, j] - m - s
    return y_arr


def log_softmax_backward(real[:, ::1] out, real[:, ::1] dy):
    cdef Py_ssize_t n = out.shape[0], d = out.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef real s
    with nogil:
        for i in range(n):
            s = 0
            for j in range(d):
                s = s + dy[i, j]
            for j in range(d):
                dx[i, j] = dy[i, j] - _exp(out[i, j]) * s
    return dx_arr


def merge_pair(const int[::1] ids, const long long[::1] offsets, int left, int right, int new_id):
    cdef Py_ssize_t n_words = offsets.shape[0] - 1, w, i, end, k = 0
    out_arr = np.empty(ids.shape[0], dtype=np.int32)
    off_arr = np.empty(offsets.shape[0], dtype=np.int64)
    cdef int[::1] out = out_arr
    cdef long long[::1] off = off_arr
    with nogil:
        off[0] = 0
        for w in range(n_words):
            i = offsets[w]
            end = offsets[w + 1]
            while i < end:
                if i + 1 < end and ids[i] == left and ids[i + 1] == right:
                    out[k] = new_id
                    i = i + 2
                else:
                    out[k] = ids[i]
                    i = i + 1
                k = k + 1
            off[w + 1] = k
    return out_arr[:k].copy(), off_arr
