# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution lowering kernels (see ``_pykernels`` for the reference)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    out_arr = np.empty((n, c * kh * kw, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, y, xx, row, iy, ix, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(oh):
                            iy = y * stride + i - padding
                            col = y * ow
                            if iy < 0 or iy >= h:
                                for xx in range(ow):
                                    out[b, row, col + xx] = 0.0
                                continue
                            for xx in range(ow):
                                ix = xx * stride + j - padding
                                if ix < 0 or ix >= w:
                                    out[b, row, col + xx] = 0.0
                                else:
                                    out[b, row, col + xx] = x[b, ch, iy, ix]
    return out_arr


def col2im(cols, shape, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    cdef const double[:, :, ::1] src = np.ascontiguousarray(cols, dtype=np.float64).reshape(n, c * kh * kw, oh * ow)
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, y, xx, row, iy, ix, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(oh):
                            iy = y * stride + i - padding
                            if iy < 0 or iy >= h:
                                continue
                            col = y * ow
                            for xx in range(ow):
                                ix = xx * stride + j - padding
                                if ix >= 0 and ix < w:
                                    out[b, ch, iy, ix] += src[b, row, col + xx]
    return out_arr
