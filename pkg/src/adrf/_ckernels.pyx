# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: fused LSTM gate math, im2col/col2im and the Adam step.

Must stay call-compatible with :mod:`adrf._pykernels`.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, isfinite, sqrt, tanh

cnp.import_array()


cdef inline double _sigmoid(double z) nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


def lstm_gates_forward(double[:, ::1] z, double[:, ::1] c_prev):
    cdef Py_ssize_t B = z.shape[0]
    cdef Py_ssize_t H = c_prev.shape[1]
    if z.shape[1] != 4 * H or c_prev.shape[0] != B:
        raise ValueError("gate pre-activations must be (B, 4H) with c_prev (B, H)")
    act_arr = np.empty((B, 4 * H), dtype=np.float64)
    h_arr = np.empty((B, H), dtype=np.float64)
    c_arr = np.empty((B, H), dtype=np.float64)
    tc_arr = np.empty((B, H), dtype=np.float64)
    cdef double[:, ::1] act = act_arr
    cdef double[:, ::1] h = h_arr
    cdef double[:, ::1] c = c_arr
    cdef double[:, ::1] tc = tc_arr
    cdef Py_ssize_t b, j
    cdef double gi, gf, go, gg, cc
    with nogil:
        for b in range(B):
            for j in range(H):
                gi = _sigmoid(z[b, j])
                gf = _sigmoid(z[b, H + j])
                go = _sigmoid(z[b, 2 * H + j])
                gg = tanh(z[b, 3 * H + j])
                act[b, j] = gi
                act[b, H + j] = gf
                act[b, 2 * H + j] = go
                act[b, 3 * H + j] = gg
                cc = gf * c_prev[b, j] + gi * gg
                c[b, j] = cc
                tc[b, j] = tanh(cc)
                h[b, j] = go * tc[b, j]
    return h_arr, c_arr, act_arr, tc_arr


def lstm_gates_backward(double[:, ::1] dh, double[:, ::1] dc, double[:, ::1] act,
                        double[:, ::1] tanh_c, double[:, ::1] c_prev):
    cdef Py_ssize_t B = dh.shape[0]
    cdef Py_ssize_t H = dh.shape[1]
    dz_arr = np.empty((B, 4 * H), dtype=np.float64)
    dcp_arr = np.empty((B, H), dtype=np.float64)
    cdef double[:, ::1] dz = dz_arr
    cdef double[:, ::1] dcp = dcp_arr
    cdef Py_ssize_t b, j
    cdef double gi, gf, go, gg, t, dct
    with nogil:
        for b in range(B):
            for j in range(H):
                gi = act[b, j]
                gf = act[b, H + j]
                go = act[b, 2 * H + j]
                gg = act[b, 3 * H + j]
                t = tanh_c[b, j]
                dct = dc[b, j] + dh[b, j] * go * (1.0 - t * t)
                dz[b, j] = dct * gg * gi * (1.0 - gi)
                dz[b, H + j] = dct * c_prev[b, j] * gf * (1.0 - gf)
                dz[b, 2 * H + j] = dh[b, j] * t * go * (1.0 - go)
                dz[b, 3 * H + j] = dct * gi * (1.0 - gg * gg)
                dcp[b, j] = dct * gf
    return dz_arr, dcp_arr


def im2col(double[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    cols_arr = np.zeros((B, C * k * k, Ho * Wo), dtype=np.float64)
    cdef double[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t b, ch, di, dj, oi, oj, ii, jj, row
    with nogil:
        for b in range(B):
            for ch in range(C):
                for di in range(k):
                    for dj in range(k):
                        row = (ch * k + di) * k + dj
                        for oi in range(Ho):
                            ii = oi * stride + di - pad
                            if ii < 0 or ii >= H:
                                continue
                            for oj in range(Wo):
                                jj = oj * stride + dj - pad
                                if jj < 0 or jj >= W:
                                    continue
                                cols[b, row, oi * Wo + oj] = x[b, ch, ii, jj]
    return cols_arr


def col2im(double[:, :, ::1] cols, int C, int H, int W, int k, int stride, int pad):
    cdef Py_ssize_t B = cols.shape[0]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    if cols.shape[1] != C * k * k or cols.shape[2] != Ho * Wo:
        raise ValueError("column matrix does not match the requested image geometry")
    x_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t b, ch, di, dj, oi, oj, ii, jj, row
    with nogil:
        for b in range(B):
            for ch in range(C):
                for di in range(k):
                    for dj in range(k):
                        row = (ch * k + di) * k + dj
                        for oi in range(Ho):
                            ii = oi * stride + di - pad
                            if ii < 0 or ii >= H:
                                continue
                            for oj in range(Wo):
                                jj = oj * stride + dj - pad
                                if jj < 0 or jj >= W:
                                    continue
                                x[b, ch, ii, jj] += cols[b, row, oi * Wo + oj]
    return x_arr


def adam_update(double[::1] m, double[::1] v, const double[::1] g, double[::1] upd,
                double lr, double beta1, double beta2, double eps, double c1, double c2):
    """Fused moment update over flat arrays; the parameter step goes to ``upd``.

    Returns False when any step is non-finite.
    """
    cdef Py_ssize_t i, n = m.shape[0]
    cdef double mi, vi, u
    cdef bint ok = True
    if v.shape[0] != n or g.shape[0] != n or upd.shape[0] != n:
        raise ValueError("adam_update: arrays differ in length")
    with nogil:
        for i in range(n):
            mi = beta1 * m[i] + (1.0 - beta1) * g[i]
            vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
            m[i] = mi
            v[i] = vi
            u = lr * ((mi / c1) / (sqrt(vi / c2) + eps))
            upd[i] = u
            if not isfinite(u):
                ok = False
    return ok
