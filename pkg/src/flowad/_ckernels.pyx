# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the dense-tensor hot loops.

Loop structure mirrors ``_pykernels.py`` exactly; both backends must produce
bit-identical results (same operation order, float64 throughout).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, p
    cdef double acc
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for p in range(k):
                    acc += a[i, p] * b[p, j]
                o[i, j] = acc
    return out


def conv2d(double[:, :, :, ::1] x, double[:, :, :, ::1] w):
    cdef Py_ssize_t nb = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef cnp.ndarray[cnp.float64_t, ndim=4] outa = np.zeros((nb, o, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] out = outa
    cdef Py_ssize_t n, oo, i, j, cc, u, v, ii, jj
    cdef double acc
    with nogil:
        for n in range(nb):
            for oo in range(o):
                for i in range(h):
                    for j in range(wd):
                        acc = 0.0
                        for cc in range(c):
                            for u in range(kh):
                                ii = i + u - ph
                                if ii < 0 or ii >= h:
                                    continue
                                for v in range(kw):
                                    jj = j + v - pw
                                    if 0 <= jj < wd:
                                        acc += x[n, cc, ii, jj] * w[oo, cc, u, v]
                        out[n, oo, i, j] = acc
    return outa


def conv2d_grad_input(double[:, :, :, ::1] gy, double[:, :, :, ::1] w):
    cdef Py_ssize_t nb = gy.shape[0], o = gy.shape[1], h = gy.shape[2], wd = gy.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef cnp.ndarray[cnp.float64_t, ndim=4] gxa = np.zeros((nb, c, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gxa
    cdef Py_ssize_t n, cc, i, j, oo, u, v, ii, jj
    cdef double acc
    with nogil:
        for n in range(nb):
            for cc in range(c):
                for i in range(h):
                    for j in range(wd):
                        acc = 0.0
                        for oo in range(o):
                            for u in range(kh):
                                ii = i - u + ph
                                if ii < 0 or ii >= h:
                                    continue
                                for v in range(kw):
                                    jj = j - v + pw
                                    if 0 <= jj < wd:
                                        acc += gy[n, oo, ii, jj] * w[oo, cc, u, v]
                        gx[n, cc, i, j] = acc
    return gxa


def conv2d_grad_weight(double[:, :, :, ::1] gy, double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t nb = gy.shape[0], o = gy.shape[1], h = gy.shape[2], wd = gy.shape[3]
    cdef Py_ssize_t c = x.shape[1]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef cnp.ndarray[cnp.float64_t, ndim=4] gwa = np.zeros((o, c, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gwa
    cdef Py_ssize_t n, oo, cc, u, v, i, j, ii, jj
    cdef double acc
    with nogil:
        for oo in range(o):
            for cc in range(c):
                for u in range(kh):
                    for v in range(kw):
                        acc = 0.0
                        for n in range(nb):
                            for i in range(h):
                                ii = i + u - ph
                                if ii < 0 or ii >= h:
                                    continue
                                for j in range(wd):
                                    jj = j + v - pw
                                    if 0 <= jj < wd:
                                        acc += gy[n, oo, i, j] * x[n, cc, ii, jj]
                        gw[oo, cc, u, v] = acc
    return gwa
