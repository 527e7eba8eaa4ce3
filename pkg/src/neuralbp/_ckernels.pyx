# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled message-passing kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t idx_t


def loo_product(const double[:, ::1] values, const idx_t[::1] ptr,
                const idx_t[::1] order, padded, init=None):
    cdef Py_ssize_t E = values.shape[0], K = values.shape[1]
    cdef Py_ssize_t S = ptr.shape[0] - 1
    out_arr = np.empty((E, K))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] pre = np.empty((max(E, 1), K))
    cdef const double[:, ::1] ini
    cdef bint has_init = init is not None
    if has_init:
        ini = np.ascontiguousarray(init, dtype=np.float64)
    cdef Py_ssize_t s, j, k, a, b, e
    cdef double acc
    with nogil:
        for s in range(S):
            a = ptr[s]
            b = ptr[s + 1]
            for k in range(K):
                acc = 1.0
                for j in range(a, b):
                    pre[j, k] = acc
                    acc = acc * values[order[j], k]
                acc = 1.0
                for j in range(b - 1, a - 1, -1):
                    e = order[j]
                    if has_init:
                        out[e, k] = ini[s, k] * (pre[j, k] * acc)
                    else:
                        out[e, k] = pre[j, k] * acc
                    acc = acc * values[e, k]
    return out_arr


def segment_product(const double[:, ::1] values, const idx_t[::1] ptr,
                    const idx_t[::1] order, padded, init):
    cdef Py_ssize_t K = values.shape[1]
    cdef Py_ssize_t S = ptr.shape[0] - 1
    cdef const double[:, ::1] ini = np.ascontiguousarray(init, dtype=np.float64)
    out_arr = np.empty((S, K))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t s, j, k
    cdef double acc
    with nogil:
        for s in range(S):
            for k in range(K):
                acc = 1.0
                for j in range(ptr[s], ptr[s + 1]):
                    acc = acc * values[order[j], k]
                out[s, k] = ini[s, k] * acc
    return out_arr


def parity_loo(const double[::1] p1, const idx_t[::1] ptr, const idx_t[::1] order,
               padded, double[::1] out):
    cdef Py_ssize_t S = ptr.shape[0] - 1
    cdef Py_ssize_t n = max(order.shape[0], 1)
    cdef double[::1] pre = np.empty(n)
    cdef Py_ssize_t s, j, a, b, e
    cdef double acc
    with nogil:
        for s in range(S):
            a = ptr[s]
            b = ptr[s + 1]
            acc = 1.0
            for j in range(a, b):
                pre[j] = acc
                acc = acc * (1.0 - 2.0 * p1[order[j]])
            acc = 1.0
            for j in range(b - 1, a - 1, -1):
                e = order[j]
                out[e] = 0.5 * (1.0 - pre[j] * acc)
                acc = acc * (1.0 - 2.0 * p1[e])
    return np.asarray(out)


def segment_sum(const double[:, ::1] values, const idx_t[::1] ptr,
                const idx_t[::1] order, padded):
    cdef Py_ssize_t H = values.shape[1]
    cdef Py_ssize_t S = ptr.shape[0] - 1
    out_arr = np.zeros((S, H))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t s, j, h, e
    with nogil:
        for s in range(S):
            for j in range(ptr[s], ptr[s + 1]):
                e = order[j]
                for h in range(H):
                    out[s, h] = out[s, h] + values[e, h]
    return out_arr
