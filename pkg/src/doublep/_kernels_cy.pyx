# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend.

Hot loops for the decode path: scaled dot-product logits, stable softmax,
weighted value reduction, nearest-centroid assignment, and the sorted
prefix-sum cut. Inputs are float32 or float64 C-contiguous arrays; every
accumulation runs in float64.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, log

cnp.import_array()

BACKEND = "cython"


def scaled_logits(floating[:, ::1] keys, double[::1] q, double scale):
    cdef Py_ssize_t n = keys.shape[0]
    cdef Py_ssize_t d = keys.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += keys[i, j] * q[j]
        ov[i] = acc * scale
    return out


def gather_scaled_logits(floating[:, ::1] keys, cnp.intp_t[::1] idx,
                         double[::1] q, double scale):
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t d = keys.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, j, row
    cdef double acc
    for i in range(n):
        row = idx[i]
        acc = 0.0
        for j in range(d):
            acc += keys[row, j] * q[j]
        ov[i] = acc * scale
    return out


def logsumexp(double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    cdef double m = x[0]
    for i in range(1, n):
        if x[i] > m:
            m = x[i]
    if n == 1:
        return m
    cdef double s = 0.0
    for i in range(n):
        s += exp(x[i] - m)
    return m + log(s)


def softmax(double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    cdef double m = x[0]
    for i in range(1, n):
        if x[i] > m:
            m = x[i]
    cdef double s = 0.0
    for i in range(n):
        ov[i] = exp(x[i] - m)
        s += ov[i]
    for i in range(n):
        ov[i] /= s
    return out


def weighted_sum(double[::1] w, floating[:, ::1] mat):
    cdef Py_ssize_t n = mat.shape[0]
    cdef Py_ssize_t d = mat.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(d, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, j
    cdef double wi
    for i in range(n):
        wi = w[i]
        for j in range(d):
            ov[j] += wi * mat[i, j]
    return out


def gather_weighted_sum(double[::1] w, floating[:, ::1] mat, cnp.intp_t[::1] idx):
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t d = mat.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(d, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, j, row
    cdef double wi
    for i in range(n):
        row = idx[i]
        wi = w[i]
        for j in range(d):
            ov[j] += wi * mat[row, j]
    return out


def nearest_centroid(floating[:, ::1] points, double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    cdef Py_ssize_t k = centroids.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] assign = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] best = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] av = assign
    cdef double[::1] bv = best
    cdef Py_ssize_t i, j, c
    cdef double dist, diff, bd
    cdef Py_ssize_t bc
    for i in range(n):
        bd = np.inf
        bc = 0
        for c in range(k):
            dist = 0.0
            for j in range(d):
                diff = points[i, j] - centroids[c, j]
                dist += diff * diff
            # strict < keeps the lowest index on ties
            if dist < bd:
                bd = dist
                bc = c
        av[i] = bc
        bv[i] = bd
    return assign, best


def sorted_prefix_count(double[::1] sorted_probs, double p):
    cdef Py_ssize_t n = sorted_probs.shape[0]
    cdef Py_ssize_t i
    cdef double total = 0.0
    cdef double prev = np.inf
    cdef double v
    for i in range(n):
        v = sorted_probs[i]
        if v > prev:
            raise ValueError("input not sorted")
        prev = v
        total += v
        if total >= p:
            return i + 1
    return n
