# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im kernels for the convolution family.

Single-threaded on purpose: the test suite relies on bit-identical results
across runs. col2im accumulates in (ki, kj)-outer order to match the numpy
fallback bit for bit.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"

ctypedef fused fptype:
    float
    double


def im2col(fptype[:, :, :, ::1] x, int kh, int kw, int sh, int sw, int oh, int ow):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t c = x.shape[1]
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, row
    if fptype is float:
        dtype = np.float32
    else:
        dtype = np.float64
    cols_arr = np.empty((n, c * kh * kw, oh * ow), dtype=dtype)
    cdef fptype[:, :, ::1] cols = cols_arr
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for oi in range(oh):
                            for oj in range(ow):
                                cols[b, row, oi * ow + oj] = x[b, ch, oi * sh + ki, oj * sw + kj]
    return cols_arr


def col2im(fptype[:, :, ::1] cols, int n, int c, int hp, int wp,
           int kh, int kw, int sh, int sw, int oh, int ow):
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, row
    if fptype is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef fptype[:, :, :, ::1] out = out_arr
    with nogil:
        for ki in range(kh):
            for kj in range(kw):
                for b in range(n):
                    for ch in range(c):
                        row = (ch * kh + ki) * kw + kj
                        for oi in range(oh):
                            for oj in range(ow):
                                out[b, ch, oi * sh + ki, oj * sw + kj] += cols[b, row, oi * ow + oj]
    return out_arr
