# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv2d kernels (stride 1, NHWC, float64).

A kernel row ``xp[n, i + di, j:j + KW, :]`` is contiguous in NHWC layout, so
the patch matrix is built from KH contiguous copies per output pixel and the
multiply-accumulate work is handed to BLAS through numpy.
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()


def im2col(double[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw):
    """Patch matrix of shape (N * Ho * Wo, KH * KW * C) for a padded batch."""
    cdef Py_ssize_t n_b = xp.shape[0], hp = xp.shape[1], wp = xp.shape[2], ch = xp.shape[3]
    cdef Py_ssize_t ho = hp - kh + 1, wo = wp - kw + 1
    cdef Py_ssize_t kwc = kw * ch, row = kh * kw * ch
    cdef Py_ssize_t n, i, j, di
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    cols_arr = np.empty((n_b * ho * wo, row), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef double* dst = &cols[0, 0]
    cdef double* src = &xp[0, 0, 0, 0]
    cdef size_t nbytes = kwc * sizeof(double)
    with nogil:
        for n in range(n_b):
            for i in range(ho):
                for j in range(wo):
                    for di in range(kh):
                        memcpy(dst, src + ((n * hp + i + di) * wp + j) * ch, nbytes)
                        dst += kwc
    return cols_arr


def col2im(double[:, ::1] cols, Py_ssize_t n_b, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t ch,
           Py_ssize_t kh, Py_ssize_t kw):
    """Scatter-add a patch-matrix gradient back onto the padded input grid."""
    cdef Py_ssize_t ho = hp - kh + 1, wo = wp - kw + 1
    cdef Py_ssize_t kwc = kw * ch
    cdef Py_ssize_t n, i, j, di, k
    if cols.shape[0] != n_b * ho * wo or cols.shape[1] != kh * kwc:
        raise ValueError("patch matrix does not match the requested grid")
    out = np.zeros((n_b, hp, wp, ch), dtype=np.float64)
    cdef double[:, :, :, ::1] g = out
    cdef double* gbase = &g[0, 0, 0, 0]
    cdef double* src = &cols[0, 0]
    cdef double* dst
    with nogil:
        for n in range(n_b):
            for i in range(ho):
                for j in range(wo):
                    for di in range(kh):
                        dst = gbase + ((n * hp + i + di) * wp + j) * ch
                        for k in range(kwc):
                            dst[k] += src[k]
                        src += kwc
    return out


def conv2d_forward(xp, w, b):
    """Valid correlation of an already padded batch ``xp`` with kernel ``w``.

    ``xp`` is (N, Hp, Wp, C), ``w`` is (KH, KW, C, F); returns (N, Hp-KH+1, Wp-KW+1, F).
    """
    kh, kw, c, f = w.shape
    n, hp, wp, _ = xp.shape
    cols = im2col(xp, kh, kw)
    y = cols @ np.ascontiguousarray(w).reshape(kh * kw * c, f)
    y += b
    return y.reshape(n, hp - kh + 1, wp - kw + 1, f)


def conv2d_backward(xp, w, gy, bint need_gx=True):
    """Gradients of :func:`conv2d_forward` given the upstream gradient ``gy``.

    Returns ``(gxp, gw, gb)`` where ``gxp`` is with respect to the padded input,
    or None when ``need_gx`` is false.
    """
    kh, kw, c, f = w.shape
    n, hp, wp, _ = xp.shape
    g2 = np.ascontiguousarray(gy).reshape(-1, f)
    cols = im2col(xp, kh, kw)
    gw = (cols.T @ g2).reshape(kh, kw, c, f)
    gb = g2.sum(axis=0)
    if not need_gx:
        return None, gw, gb
    gcols = g2 @ np.ascontiguousarray(w).reshape(kh * kw * c, f).T
    return col2im(np.ascontiguousarray(gcols), n, hp, wp, c, kh, kw), gw, gb
