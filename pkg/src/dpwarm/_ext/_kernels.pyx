# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batch-mean loss kernels; signatures mirror ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, tanh

cnp.import_array()


cdef inline double _sigmoid(double z) nogil:
    return 0.5 * (1.0 + tanh(0.5 * z))


cdef void _mean_rows(const double[:, ::1] X, const cnp.int64_t[::1] idx,
                     bint full, double[::1] out) noexcept nogil:
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t b = X.shape[0] if full else idx.shape[0]
    cdef Py_ssize_t i, j, r
    for j in range(d):
        out[j] = 0.0
    for i in range(b):
        r = i if full else idx[i]
        for j in range(d):
            out[j] += X[r, j]
    for j in range(d):
        out[j] /= b


cdef double _dot(const double[::1] a, const double[::1] b) noexcept nogil:
    cdef Py_ssize_t j
    cdef double s = 0.0
    for j in range(a.shape[0]):
        s += a[j] * b[j]
    return s


def mean_rows(const double[:, ::1] X, const cnp.int64_t[::1] idx=None):
    out = np.empty(X.shape[1])
    _mean_rows(X, idx, idx is None, out)
    return out


def sine_bowl_mean_value(const double[::1] w, const double[:, ::1] X,
                         const cnp.int64_t[::1] idx=None):
    cdef double[::1] xbar = mean_rows(X, idx)
    cdef double s = _dot(w, w)
    return 0.5 * (s + sin(s)) + _dot(xbar, w)


def sine_bowl_mean_grad(const double[::1] w, const double[:, ::1] X,
                        const cnp.int64_t[::1] idx=None):
    out = np.empty(X.shape[1])
    cdef double[::1] o = out
    cdef Py_ssize_t j
    cdef double c
    _mean_rows(X, idx, idx is None, o)
    c = 1.0 + cos(_dot(w, w))
    for j in range(o.shape[0]):
        o[j] += c * w[j]
    return out


def quadratic_mean_value(const double[::1] w, const double[:, ::1] X,
                         const cnp.int64_t[::1] idx=None):
    cdef bint full = idx is None
    cdef Py_ssize_t b = X.shape[0] if full else idx.shape[0]
    cdef Py_ssize_t i, j, r
    cdef double acc = 0.0, t
    for i in range(b):
        r = i if full else idx[i]
        for j in range(X.shape[1]):
            t = w[j] - X[r, j]
            acc += t * t
    return 0.5 * acc / b


def quadratic_mean_grad(const double[::1] w, const double[:, ::1] X,
                        const cnp.int64_t[::1] idx=None):
    out = np.empty(X.shape[1])
    cdef double[::1] o = out
    cdef Py_ssize_t j
    _mean_rows(X, idx, idx is None, o)
    for j in range(o.shape[0]):
        o[j] = w[j] - o[j]
    return out


def glm_mean_value(const double[::1] w, const double[:, ::1] X, const double[::1] y,
                   const cnp.int64_t[::1] idx=None):
    cdef bint full = idx is None
    cdef Py_ssize_t b = X.shape[0] if full else idx.shape[0]
    cdef Py_ssize_t i, j, r
    cdef double acc = 0.0, z, res
    for i in range(b):
        r = i if full else idx[i]
        z = 0.0
        for j in range(X.shape[1]):
            z += X[r, j] * w[j]
        res = y[r] - _sigmoid(z)
        acc += res * res
    return acc / b


def glm_mean_grad(const double[::1] w, const double[:, ::1] X, const double[::1] y,
                  const cnp.int64_t[::1] idx=None):
    cdef Py_ssize_t d = X.shape[1]
    out = np.zeros(d)
    cdef double[::1] o = out
    cdef bint full = idx is None
    cdef Py_ssize_t b = X.shape[0] if full else idx.shape[0]
    cdef Py_ssize_t i, j, r
    cdef double z, s, coef
    for i in range(b):
        r = i if full else idx[i]
        z = 0.0
        for j in range(d):
            z += X[r, j] * w[j]
        s = _sigmoid(z)
        coef = -2.0 * (y[r] - s) * s * (1.0 - s)
        for j in range(d):
            o[j] += coef * X[r, j]
    for j in range(d):
        o[j] /= b
    return out
