# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled circular conv2d kernels.

Same contract as ``_conv_py``. The wrap-around gather (im2col) and its
scatter-add adjoint (col2im) run in C; the channel contractions go to BLAS.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _im2col(const double[:, :, ::1] x, double[:, ::1] cols, Py_ssize_t k) noexcept nogil:
    # cols[(c*k + a)*k + b, i*W + j] = x[c, (i + a - p) % H, (j + b - p) % W]
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2], p = k // 2
    cdef Py_ssize_t c, a, b, i, j, si, sj, n, row
    cdef double* dst
    cdef const double* src
    for c in range(C):
        for a in range(k):
            for b in range(k):
                row = (c * k + a) * k + b
                sj = ((b - p) % W + W) % W
                n = W - sj
                for i in range(H):
                    si = ((i + a - p) % H + H) % H
                    dst = &cols[row, i * W]
                    src = &x[c, si, 0]
                    for j in range(n):
                        dst[j] = src[j + sj]
                    for j in range(n, W):
                        dst[j] = src[j + sj - W]


cdef void _col2im(const double[:, ::1] cols, double[:, :, ::1] x, Py_ssize_t k) noexcept nogil:
    # adjoint of _im2col: scatter-add back to the wrapped source pixels
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2], p = k // 2
    cdef Py_ssize_t c, a, b, i, j, si, sj, n, row
    cdef const double* src
    cdef double* dst
    for c in range(C):
        for a in range(k):
            for b in range(k):
                row = (c * k + a) * k + b
                sj = ((b - p) % W + W) % W
                n = W - sj
                for i in range(H):
                    si = ((i + a - p) % H + H) % H
                    src = &cols[row, i * W]
                    dst = &x[c, si, 0]
                    for j in range(n):
                        dst[j + sj] += src[j]
                    for j in range(n, W):
                        dst[j + sj - W] += src[j]


def im2col(double[:, :, ::1] x, Py_ssize_t k):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cols = np.empty((C * k * k, H * W))
    cdef double[:, ::1] cv = cols
    with nogil:
        _im2col(x, cv, k)
    return cols


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] w, double[::1] bias):
    cdef Py_ssize_t H = x.shape[1], W = x.shape[2], cout = w.shape[0], k = w.shape[2]
    cols = im2col(x, k)
    out = np.asarray(w).reshape(cout, -1) @ cols
    out += np.asarray(bias)[:, None]
    return out.reshape(cout, H, W)


def conv2d_grad_input(double[:, :, ::1] gy, double[:, :, :, ::1] w):
    cdef Py_ssize_t cout = w.shape[0], cin = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t H = gy.shape[1], W = gy.shape[2]
    cols = np.ascontiguousarray(np.asarray(w).reshape(cout, -1).T @ np.asarray(gy).reshape(cout, -1))
    gx = np.zeros((cin, H, W))
    cdef double[:, ::1] cv = cols
    cdef double[:, :, ::1] gv = gx
    with nogil:
        _col2im(cv, gv, k)
    return gx


def conv2d_grad_weight(double[:, :, ::1] gy, double[:, :, ::1] x, Py_ssize_t k):
    cdef Py_ssize_t cout = gy.shape[0], cin = x.shape[0]
    cols = im2col(x, k)
    gw = np.asarray(gy).reshape(cout, -1) @ cols.T
    return gw.reshape(cout, cin, k, k)
