# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled causal 1-d convolution kernels (hot path of the encoders).

Loops are ordered so the innermost dimension is the contiguous output
(or input) channel axis, which the C compiler can vectorize.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv1d_forward(x, w, bias, str direction):
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(bias, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], T = xv.shape[1], cin = xv.shape[2]
    cdef Py_ssize_t width = wv.shape[0], cout = wv.shape[2]
    out = np.empty((B, T, cout))
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t b, t, tau, c, o, s
    cdef int fwd = 1 if direction == "forward" else 0
    cdef double xc
    for b in range(B):
        for t in range(T):
            for o in range(cout):
                ov[b, t, o] = bv[o]
            for tau in range(width):
                s = t - tau if fwd else t + tau
                if s < 0 or s >= T:
                    continue
                for c in range(cin):
                    xc = xv[b, s, c]
                    for o in range(cout):
                        ov[b, t, o] += xc * wv[tau, c, o]
    return out


def conv1d_backward(x, w, g, str direction):
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], T = xv.shape[1], cin = xv.shape[2]
    cdef Py_ssize_t width = wv.shape[0], cout = wv.shape[2]
    gx = np.zeros((B, T, cin))
    gw = np.zeros((width, cin, cout))
    gbias = np.zeros(cout)
    cdef double[:, :, ::1] gxv = gx
    cdef double[:, :, ::1] gwv = gw
    cdef double[::1] gbv = gbias
    cdef Py_ssize_t b, t, tau, c, o, s
    cdef int fwd = 1 if direction == "forward" else 0
    cdef double acc, xc
    for b in range(B):
        for t in range(T):
            for o in range(cout):
                gbv[o] += gv[b, t, o]
            for tau in range(width):
                s = t - tau if fwd else t + tau
                if s < 0 or s >= T:
                    continue
                for c in range(cin):
                    acc = 0.0
                    xc = xv[b, s, c]
                    for o in range(cout):
                        acc += gv[b, t, o] * wv[tau, c, o]
                        gwv[tau, c, o] += gv[b, t, o] * xc
                    gxv[b, s, c] += acc
    return gx, gw, gbias
