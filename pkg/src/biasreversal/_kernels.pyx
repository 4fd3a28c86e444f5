# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled IRLS kernels over one-hot designs.

A design row is a list of active column indices (value 1), padded with -1.
Rows may be compressed patterns carrying an observation count and a count
of positive labels.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, fabs

cnp.import_array()


cdef inline double _softplus(double z) nogil:
    if z > 0:
        return z + log1p(exp(-z))
    return log1p(exp(z))


cdef inline double _sigmoid(double z) nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


def linear_predictor(const int[:, ::1] active, const double[::1] beta):
    cdef Py_ssize_t n = active.shape[0], m = active.shape[1], i, j
    cdef int a
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] eta = out
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(m):
                a = active[i, j]
                if a >= 0:
                    acc = acc + beta[a]
            eta[i] = acc
    return out


def newton_terms(const int[:, ::1] active, const double[::1] count,
                 const double[::1] ysum, const double[::1] beta):
    """Return (negative log-likelihood, gradient, Hessian), all unscaled sums."""
    cdef Py_ssize_t n = active.shape[0], m = active.shape[1], k = beta.shape[0]
    cdef Py_ssize_t i, j, l
    cdef int a, b
    cdef double eta, p, c, g, w, loss = 0.0
    grad_arr = np.zeros(k, dtype=np.float64)
    hess_arr = np.zeros((k, k), dtype=np.float64)
    cdef double[::1] grad = grad_arr
    cdef double[:, ::1] hess = hess_arr
    with nogil:
        for i in range(n):
            eta = 0.0
            for j in range(m):
                a = active[i, j]
                if a >= 0:
                    eta = eta + beta[a]
            c = count[i]
            p = _sigmoid(eta)
            loss = loss + c * _softplus(eta) - ysum[i] * eta
            g = c * p - ysum[i]
            w = c * p * (1.0 - p)
            for j in range(m):
                a = active[i, j]
                if a < 0:
                    continue
                grad[a] = grad[a] + g
                hess[a, a] = hess[a, a] + w
                for l in range(j + 1, m):
                    b = active[i, l]
                    if b < 0:
                        continue
                    hess[a, b] = hess[a, b] + w
                    hess[b, a] = hess[b, a] + w
    return loss, grad_arr, hess_arr
