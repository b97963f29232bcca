# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel fused grouped convolution.

Same contract as kbnet._fused_np.  For each pixel the N kernel bases are
blended into a fused kernel covering all channels, then applied to the
zero-padded K x K neighborhood.  The blend runs over the bases' natural
contiguous layout (one axpy per basis into a flat scratch buffer), which
is what lets the compiler vectorize it; the backward pass streams the
same buffers to accumulate all three gradients in a single sweep.

Loop order is fixed and serial, so results are deterministic across runs.
"""

import numpy as np

cimport numpy as cnp

ctypedef fused real:
    float
    double


def fused_conv_forward(real[:, :, :, ::1] xe,
                       real[:, :, :, :, ::1] bases,
                       real[:, :, :, ::1] coeffs):
    cdef Py_ssize_t b = xe.shape[0], c = xe.shape[1]
    cdef Py_ssize_t h = xe.shape[2], w = xe.shape[3]
    cdef Py_ssize_t n = bases.shape[0], k = bases.shape[3]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t fkk = 4 * k * k, mlen = c * fkk
    cdef Py_ssize_t bi, ci, i, j, t, u, ki, kj, ii, jj, base, idx, mo
    cdef real coef, acc
    cdef const real* bp

    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((b, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr

    # per-pixel fused kernel for all channels, flat (c * 4 * k * k)
    m_arr = np.zeros(mlen, dtype=dtype)
    cdef real[::1] mbuf = m_arr
    cdef const real* bases0 = &bases[0, 0, 0, 0, 0]

    with nogil:
        for bi in range(b):
            for i in range(h):
                for j in range(w):
                    for idx in range(mlen):
                        mbuf[idx] = 0
                    for t in range(n):
                        coef = coeffs[bi, t, i, j]
                        if coef == 0:
                            continue
                        bp = bases0 + t * mlen
                        for idx in range(mlen):
                            mbuf[idx] = mbuf[idx] + coef * bp[idx]
                    for ci in range(c):
                        base = (ci >> 2) << 2
                        mo = ci * fkk
                        acc = 0
                        for u in range(4):
                            for ki in range(k):
                                ii = i + ki - p
                                if ii < 0 or ii >= h:
                                    continue
                                for kj in range(k):
                                    jj = j + kj - p
                                    if jj < 0 or jj >= w:
                                        continue
                                    acc = acc + mbuf[mo + (u * k + ki) * k + kj] \
                                        * xe[bi, base + u, ii, jj]
                        out[bi, ci, i, j] = acc
    return out_arr


def fused_conv_backward(real[:, :, :, ::1] xe,
                        real[:, :, :, :, ::1] bases,
                        real[:, :, :, ::1] coeffs,
                        real[:, :, :, ::1] grad_out):
    cdef Py_ssize_t b = xe.shape[0], c = xe.shape[1]
    cdef Py_ssize_t h = xe.shape[2], w = xe.shape[3]
    cdef Py_ssize_t n = bases.shape[0], k = bases.shape[3]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t fkk = 4 * k * k, mlen = c * fkk
    cdef Py_ssize_t bi, ci, i, j, t, u, ki, kj, ii, jj, base, idx, mo
    cdef real g, coef, s, v

    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx_arr = np.zeros((b, c, h, w), dtype=dtype)
    gw_arr = np.zeros((n, c, 4, k, k), dtype=dtype)
    gf_arr = np.zeros((b, n, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] gf = gf_arr

    # pbuf holds the per-pixel outer product grad_out x patch (flat, padded
    # taps zeroed); mbuf accumulates the fused kernel for the gx scatter
    p_arr = np.zeros(mlen, dtype=dtype)
    m_arr = np.zeros(mlen, dtype=dtype)
    cdef real[::1] pbuf = p_arr
    cdef real[::1] mbuf = m_arr
    cdef const real* bases0 = &bases[0, 0, 0, 0, 0]
    cdef real[:, :, :, :, ::1] gwv = gw_arr
    cdef real* gw0 = &gwv[0, 0, 0, 0, 0]
    cdef real* gwp
    cdef const real* bp

    with nogil:
        for bi in range(b):
            for i in range(h):
                for j in range(w):
                    for ci in range(c):
                        g = grad_out[bi, ci, i, j]
                        base = (ci >> 2) << 2
                        mo = ci * fkk
                        for u in range(4):
                            for ki in range(k):
                                ii = i + ki - p
                                for kj in range(k):
                                    jj = j + kj - p
                                    if 0 <= ii < h and 0 <= jj < w:
                                        pbuf[mo + (u * k + ki) * k + kj] = \
                                            g * xe[bi, base + u, ii, jj]
                                    else:
                                        pbuf[mo + (u * k + ki) * k + kj] = 0
                    for idx in range(mlen):
                        mbuf[idx] = 0
                    for t in range(n):
                        coef = coeffs[bi, t, i, j]
                        bp = bases0 + t * mlen
                        gwp = gw0 + t * mlen
                        s = 0
                        for idx in range(mlen):
                            v = bp[idx]
                            s = s + v * pbuf[idx]
                            gwp[idx] = gwp[idx] + coef * pbuf[idx]
                            mbuf[idx] = mbuf[idx] + coef * v
                        gf[bi, t, i, j] = s
                    for ci in range(c):
                        g = grad_out[bi, ci, i, j]
                        if g == 0:
                            continue
                        base = (ci >> 2) << 2
                        mo = ci * fkk
                        for u in range(4):
                            for ki in range(k):
                                ii = i + ki - p
                                if ii < 0 or ii >= h:
                                    continue
                                for kj in range(k):
                                    jj = j + kj - p
                                    if jj < 0 or jj >= w:
                                        continue
                                    gx[bi, base + u, ii, jj] = (
                                        gx[bi, base + u, ii, jj]
                                        + g * mbuf[mo + (u * k + ki) * k + kj]
                                    )
    return gx_arr, gw_arr, gf_arr
