# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3x3 convolution kernels (stride 1, zero padding 1, float64).

Hot path of the toy trainer: direct loops over a padded buffer, no
intermediate window stack. Results match the numpy fallback to float64
rounding; summation order is (c_in, ky, kx) innermost for both directions.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "compiled"


cdef void _forward(double[:, :, ::1] xp, double[:, :, :, ::1] k,
                   double[::1] b, double[:, :, ::1] out,
                   Py_ssize_t c_in, Py_ssize_t c_out,
                   Py_ssize_t h, Py_ssize_t w) noexcept nogil:
    # kx unrolled by hand; summation order (c_in, ky, kx) matches the
    # numpy backend to float64 rounding
    cdef Py_ssize_t o, c, y, x, ky
    cdef double acc
    for o in range(c_out):
        for y in range(h):
            for x in range(w):
                acc = b[o]
                for c in range(c_in):
                    for ky in range(3):
                        acc += k[o, c, ky, 0] * xp[c, y + ky, x]
                        acc += k[o, c, ky, 1] * xp[c, y + ky, x + 1]
                        acc += k[o, c, ky, 2] * xp[c, y + ky, x + 2]
                out[o, y, x] = acc


cdef void _backward(double[:, :, ::1] xp, double[:, :, :, ::1] k,
                    double[:, :, ::1] gout, double[:, :, ::1] gxp,
                    double[:, :, :, ::1] gk, double[::1] gb,
                    Py_ssize_t c_in, Py_ssize_t c_out,
                    Py_ssize_t h, Py_ssize_t w) noexcept nogil:
    cdef Py_ssize_t o, c, y, x, ky
    cdef double g
    for o in range(c_out):
        for y in range(h):
            for x in range(w):
                g = gout[o, y, x]
                gb[o] += g
                for c in range(c_in):
                    for ky in range(3):
                        gk[o, c, ky, 0] += g * xp[c, y + ky, x]
                        gk[o, c, ky, 1] += g * xp[c, y + ky, x + 1]
                        gk[o, c, ky, 2] += g * xp[c, y + ky, x + 2]
                        gxp[c, y + ky, x] += g * k[o, c, ky, 0]
                        gxp[c, y + ky, x + 1] += g * k[o, c, ky, 1]
                        gxp[c, y + ky, x + 2] += g * k[o, c, ky, 2]


def conv2d_forward(x, kernel, bias):
    """Cross-correlate x [C_in,H,W] with kernel [C_out,C_in,3,3] plus bias."""
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t c_out = kernel.shape[0]
    xp = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1] = x
    out = np.empty((c_out, h, w), dtype=np.float64)
    k = np.ascontiguousarray(kernel, dtype=np.float64)
    b = np.ascontiguousarray(bias, dtype=np.float64)
    _forward(xp, k, b, out, c_in, c_out, h, w)
    return out


def conv2d_backward(x, kernel, grad_out):
    """Gradients of conv2d_forward w.r.t. (x, kernel, bias)."""
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t c_out = kernel.shape[0]
    xp = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1] = x
    gxp = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
    gk = np.zeros((c_out, c_in, 3, 3), dtype=np.float64)
    gb = np.zeros(c_out, dtype=np.float64)
    k = np.ascontiguousarray(kernel, dtype=np.float64)
    g = np.ascontiguousarray(grad_out, dtype=np.float64)
    _backward(xp, k, g, gxp, gk, gb, c_in, c_out, h, w)
    gx = gxp[:, 1:-1, 1:-1].copy()
    return gx, gk, gb
