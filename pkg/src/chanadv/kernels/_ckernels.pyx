# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_numpy.py``.

Matrix products go through the BLAS exported by scipy; the surrounding
loops (im2col/col2im, pooling windows, LSTM gate math) run in C.
"""

import numpy as np

from libc.math cimport tanh
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm


cdef void _gemm(bint ta, bint tb, int m, int n, int k, double alpha,
                const double* a, int lda, const double* b, int ldb,
                double beta, double* c, int ldc) noexcept nogil:
    # row-major C[m,n] = alpha * op(A) @ op(B) + beta * C, via column-major dgemm on transposes
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    if m == 0 or n == 0:
        return
    dgemm(&cb, &ca, &n, &m, &k, &alpha, <double*>b, &ldb, <double*>a, &lda, &beta, c, &ldc)


cdef inline double _sig(double z) noexcept nogil:
    return 0.5 * (tanh(0.5 * z) + 1.0)


cdef void _im2col(const double[:, :, ::1] x, double* cols) noexcept nogil:
    # cols is [C*9, H*W]
    cdef Py_ssize_t c_n = x.shape[0], h_n = x.shape[1], w_n = x.shape[2]
    cdef Py_ssize_t hw = h_n * w_n
    cdef Py_ssize_t c, i, j, h, w, hh, ww, row
    cdef double* dst
    for c in range(c_n):
        for i in range(3):
            for j in range(3):
                row = (c * 9 + i * 3 + j) * hw
                for h in range(h_n):
                    hh = h + i - 1
                    dst = cols + row + h * w_n
                    if hh < 0 or hh >= h_n:
                        memset(dst, 0, w_n * sizeof(double))
                        continue
                    for w in range(w_n):
                        ww = w + j - 1
                        dst[w] = x[c, hh, ww] if 0 <= ww < w_n else 0.0


def conv3x3_forward(x, w, b):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef int n_n = xv.shape[0], c_n = xv.shape[1], h_n = xv.shape[2], w_n = xv.shape[3]
    cdef int o_n = wv.shape[0], k = c_n * 9, hw = h_n * w_n
    if wv.shape[1] != k:
        raise ValueError(f"conv3x3: weight expects {wv.shape[1] // 9} input channels, got {c_n}")
    y = np.empty((n_n, o_n, h_n, w_n))
    cdef double[:, :, :, ::1] yv = y
    cdef double[:, ::1] cols = np.empty((k, max(hw, 1)))
    cdef Py_ssize_t n, o, p
    cdef double bias
    if hw == 0 or n_n == 0:
        return y
    with nogil:
        for n in range(n_n):
            _im2col(xv[n], &cols[0, 0])
            for o in range(o_n):
                bias = bv[o]
                for p in range(hw):
                    (&yv[n, 0, 0, 0])[o * hw + p] = bias
            _gemm(False, False, o_n, hw, k, 1.0, &wv[0, 0], k, &cols[0, 0], hw, 1.0, &yv[n, 0, 0, 0], hw)
    return y


def conv3x3_backward(x, w, gy):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    cdef double[:, :, :, ::1] gyv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef int n_n = xv.shape[0], c_n = xv.shape[1], h_n = xv.shape[2], w_n = xv.shape[3]
    cdef int o_n = wv.shape[0], k = c_n * 9, hw = h_n * w_n
    gx = np.zeros((n_n, c_n, h_n, w_n))
    gw = np.zeros((o_n, k))
    gb = np.zeros(o_n)
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, ::1] gwv = gw
    cdef double[::1] gbv = gb
    cdef double[:, ::1] cols = np.empty((k, max(hw, 1)))
    cdef double[:, ::1] gcols = np.empty((k, max(hw, 1)))
    cdef Py_ssize_t n, o, p, c, i, j, h, ww, hh, row
    cdef double acc
    if hw == 0 or n_n == 0:
        return gx, gw.reshape(w.shape), gb
    with nogil:
        for n in range(n_n):
            for o in range(o_n):
                acc = 0.0
                for p in range(hw):
                    acc = acc + (&gyv[n, 0, 0, 0])[o * hw + p]
                gbv[o] += acc
            _im2col(xv[n], &cols[0, 0])
            _gemm(False, True, o_n, k, hw, 1.0, &gyv[n, 0, 0, 0], hw, &cols[0, 0], hw, 1.0, &gwv[0, 0], k)
            _gemm(True, False, k, hw, o_n, 1.0, &wv[0, 0], k, &gyv[n, 0, 0, 0], hw, 0.0, &gcols[0, 0], hw)
            for c in range(c_n):
                for i in range(3):
                    for j in range(3):
                        row = c * 9 + i * 3 + j
                        for h in range(h_n):
                            hh = h + i - 1
                            if hh < 0 or hh >= h_n:
                                continue
                            for ww in range(w_n):
                                if 0 <= ww + j - 1 < w_n:
                                    gxv[n, c, hh, ww + j - 1] += gcols[row, h * w_n + ww]
    return gx, gw.reshape(w.shape), gb


def maxpool2_forward(x):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n_n = xv.shape[0], c_n = xv.shape[1]
    cdef Py_ssize_t ho = xv.shape[2] // 2, wo = xv.shape[3] // 2
    y = np.empty((n_n, c_n, ho, wo))
    arg = np.empty((n_n, c_n, ho, wo), dtype=np.int8)
    cdef double[:, :, :, ::1] yv = y
    cdef signed char[:, :, :, ::1] av = arg
    cdef Py_ssize_t n, c, h, w, q
    cdef double best, v
    cdef signed char bi
    with nogil:
        for n in range(n_n):
            for c in range(c_n):
                for h in range(ho):
                    for w in range(wo):
                        best = xv[n, c, 2 * h, 2 * w]
                        bi = 0
                        for q in range(1, 4):
                            v = xv[n, c, 2 * h + q // 2, 2 * w + q % 2]
                            if v > best:
                                best = v
                                bi = <signed char>q
                        yv[n, c, h, w] = best
                        av[n, c, h, w] = bi
    return y, arg


def maxpool2_backward(gy, arg, in_shape):
    cdef double[:, :, :, ::1] gyv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef signed char[:, :, :, ::1] av = np.ascontiguousarray(arg, dtype=np.int8)
    gx = np.zeros(tuple(in_shape))
    cdef double[:, :, :, ::1] gxv = gx
    cdef Py_ssize_t n_n = gyv.shape[0], c_n = gyv.shape[1], ho = gyv.shape[2], wo = gyv.shape[3]
    cdef Py_ssize_t n, c, h, w, q
    with nogil:
        for n in range(n_n):
            for c in range(c_n):
                for h in range(ho):
                    for w in range(wo):
                        q = av[n, c, h, w]
                        gxv[n, c, 2 * h + q // 2, 2 * w + q % 2] = gyv[n, c, h, w]
    return gx


def lstm_forward(xw, wh, h0, c0):
    cdef double[:, :, ::1] xv = np.ascontiguousarray(xw, dtype=np.float64)
    cdef double[:, ::1] whv = np.ascontiguousarray(wh, dtype=np.float64)
    cdef int m_n = xv.shape[0], t_n = xv.shape[1], h4 = xv.shape[2]
    cdef int hd = h4 // 4
    hs = np.empty((m_n, t_n, hd))
    cs = np.empty((m_n, t_n, hd))
    gates = np.empty((m_n, t_n, h4))
    cdef double[:, :, ::1] hsv = hs
    cdef double[:, :, ::1] csv = cs
    cdef double[:, :, ::1] gv = gates
    cdef double[:, ::1] hbuf = np.array(h0, dtype=np.float64, order="C")
    cdef double[:, ::1] cbuf = np.array(c0, dtype=np.float64, order="C")
    cdef double[:, ::1] z = np.empty((m_n, h4))
    cdef Py_ssize_t t, m, q
    cdef double gi, gf, gg, go, c
    if m_n == 0 or hd == 0:
        return hs, cs, gates
    with nogil:
        for t in range(t_n):
            for m in range(m_n):
                memcpy(&z[m, 0], &xv[m, t, 0], h4 * sizeof(double))
            _gemm(False, False, m_n, h4, hd, 1.0, &hbuf[0, 0], hd, &whv[0, 0], h4, 1.0, &z[0, 0], h4)
            for m in range(m_n):
                for q in range(hd):
                    gi = _sig(z[m, q])
                    gf = _sig(z[m, hd + q])
                    gg = tanh(z[m, 2 * hd + q])
                    go = _sig(z[m, 3 * hd + q])
                    c = gf * cbuf[m, q] + gi * gg
                    cbuf[m, q] = c
                    hbuf[m, q] = go * tanh(c)
                    csv[m, t, q] = c
                    hsv[m, t, q] = hbuf[m, q]
                    gv[m, t, q] = gi
                    gv[m, t, hd + q] = gf
                    gv[m, t, 2 * hd + q] = gg
                    gv[m, t, 3 * hd + q] = go
    return hs, cs, gates


def lstm_backward(ghs, hs, cs, gates, wh, h0, c0):
    cdef double[:, :, ::1] ghv = np.ascontiguousarray(ghs, dtype=np.float64)
    cdef double[:, :, ::1] hsv = np.ascontiguousarray(hs, dtype=np.float64)
    cdef double[:, :, ::1] csv = np.ascontiguousarray(cs, dtype=np.float64)
    cdef double[:, :, ::1] gv = np.ascontiguousarray(gates, dtype=np.float64)
    cdef double[:, ::1] whv = np.ascontiguousarray(wh, dtype=np.float64)
    cdef double[:, ::1] h0v = np.ascontiguousarray(h0, dtype=np.float64)
    cdef double[:, ::1] c0v = np.ascontiguousarray(c0, dtype=np.float64)
    cdef int m_n = hsv.shape[0], t_n = hsv.shape[1], hd = hsv.shape[2]
    cdef int h4 = 4 * hd
    gxw = np.empty((m_n, t_n, h4))
    gwh = np.zeros((hd, h4))
    dh_next = np.zeros((m_n, hd))
    dc_next = np.zeros((m_n, hd))
    cdef double[:, :, ::1] gxv = gxw
    cdef double[:, ::1] gwv = gwh
    cdef double[:, ::1] dhn = dh_next
    cdef double[:, ::1] dcn = dc_next
    cdef double[:, ::1] dz = np.empty((m_n, h4))
    cdef Py_ssize_t t, m, q
    cdef double gi, gf, gg, go, tc, dh, dc, cp
    cdef const double* hprev
    cdef int ldh
    if m_n == 0 or hd == 0:
        return gxw, gwh, dh_next, dc_next
    with nogil:
        for t in range(t_n - 1, -1, -1):
            for m in range(m_n):
                for q in range(hd):
                    gi = gv[m, t, q]
                    gf = gv[m, t, hd + q]
                    gg = gv[m, t, 2 * hd + q]
                    go = gv[m, t, 3 * hd + q]
                    cp = csv[m, t - 1, q] if t > 0 else c0v[m, q]
                    tc = tanh(csv[m, t, q])
                    dh = ghv[m, t, q] + dhn[m, q]
                    dc = dh * go * (1.0 - tc * tc) + dcn[m, q]
                    dz[m, q] = dc * gg * gi * (1.0 - gi)
                    dz[m, hd + q] = dc * cp * gf * (1.0 - gf)
                    dz[m, 2 * hd + q] = dc * gi * (1.0 - gg * gg)
                    dz[m, 3 * hd + q] = dh * tc * go * (1.0 - go)
                    dcn[m, q] = dc * gf
                memcpy(&gxv[m, t, 0], &dz[m, 0], h4 * sizeof(double))
            if t > 0:
                hprev = &hsv[0, t - 1, 0]
                ldh = t_n * hd
            else:
                hprev = &h0v[0, 0]
                ldh = hd
            _gemm(True, False, hd, h4, m_n, 1.0, hprev, ldh, &dz[0, 0], h4, 1.0, &gwv[0, 0], h4)
            _gemm(False, True, m_n, hd, h4, 1.0, &dz[0, 0], h4, &whv[0, 0], h4, 0.0, &dhn[0, 0], hd)
    return gxw, gwh, dh_next, dc_next
