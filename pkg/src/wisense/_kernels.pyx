# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. ``_fallback.py`` holds the numpy reference versions."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def music_denominator(en, phi, omega):
    en = np.asarray(en)
    cdef Py_ssize_t n_theta = phi.shape[0], wa = phi.shape[1], ws = phi.shape[2]
    cdef Py_ssize_t n_tau = omega.shape[0], K = en.shape[1]
    if en.shape[0] != wa * ws or omega.shape[1] != ws:
        raise ValueError("steering factors do not match the noise basis")
    # split real/imag parts into contiguous buffers: plain double loops vectorize well
    ec = np.conj(en)
    cdef const double[:, :] e_re = np.ascontiguousarray(ec.real, dtype=np.float64)
    cdef const double[:, :] e_im = np.ascontiguousarray(ec.imag, dtype=np.float64)
    cdef const double[:, :, :] p_re = np.ascontiguousarray(np.real(phi), dtype=np.float64)
    cdef const double[:, :, :] p_im = np.ascontiguousarray(np.imag(phi), dtype=np.float64)
    cdef const double[:, :] o_re = np.ascontiguousarray(np.real(omega), dtype=np.float64)
    cdef const double[:, :] o_im = np.ascontiguousarray(np.imag(omega), dtype=np.float64)
    out = np.zeros((n_theta, n_tau), dtype=np.float64)
    cdef double[:, :] o = out
    cdef double[:, :] q_re = np.zeros((K, ws))
    cdef double[:, :] q_im = np.zeros((K, ws))
    cdef Py_ssize_t t, u, i, j, k
    cdef double ar, ai, xr, xi, yr, yi, total
    for t in range(n_theta):
        for k in range(K):
            for j in range(ws):
                ar = 0.0
                ai = 0.0
                for i in range(wa):
                    xr = e_re[i * ws + j, k]
                    xi = e_im[i * ws + j, k]
                    yr = p_re[t, i, j]
                    yi = p_im[t, i, j]
                    ar = ar + (xr * yr - xi * yi)
                    ai = ai + (xr * yi + xi * yr)
                q_re[k, j] = ar
                q_im[k, j] = ai
        for u in range(n_tau):
            total = 0.0
            for k in range(K):
                ar = 0.0
                ai = 0.0
                for j in range(ws):
                    xr = q_re[k, j]
                    xi = q_im[k, j]
                    yr = o_re[u, j]
                    yi = o_im[u, j]
                    ar = ar + (xr * yr - xi * yi)
                    ai = ai + (xr * yi + xi * yr)
                total = total + (ar * ar + ai * ai)
            o[t, u] = total
    return out


cdef inline double _lerp(double a, double b, double t, double t1) nogil:
    # anchored at the nearer end: exact at t = 0, t = 1 and when a == b
    if t <= 0.5:
        return a + t * (b - a)
    return b - t1 * (b - a)


def bilinear_upsample(src, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef const double[:, :, :] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef Py_ssize_t C = s.shape[0], h = s.shape[1], w = s.shape[2]
    cdef double[:] r = np.linspace(0.0, h - 1.0, out_h)
    cdef double[:] c = np.linspace(0.0, w - 1.0, out_w)
    out = np.empty((C, out_h, out_w), dtype=np.float64)
    cdef double[:, :, :] o = out
    cdef Py_ssize_t ch, y, x, r1, c1
    cdef double dr1, dr2, dc1, dc2, top, bot
    for y in range(out_h):
        r1 = <Py_ssize_t>r[y]
        if r1 > h - 2:
            r1 = h - 2
        dr1 = (r1 + 1) - r[y]
        dr2 = r[y] - r1
        for x in range(out_w):
            c1 = <Py_ssize_t>c[x]
            if c1 > w - 2:
                c1 = w - 2
            dc1 = (c1 + 1) - c[x]
            dc2 = c[x] - c1
            for ch in range(C):
                top = _lerp(s[ch, r1, c1], s[ch, r1, c1 + 1], dc2, dc1)
                bot = _lerp(s[ch, r1 + 1, c1], s[ch, r1 + 1, c1 + 1], dc2, dc1)
                o[ch, y, x] = _lerp(top, bot, dr2, dr1)
    return out


def best_response(v_r, v_c, q, cost, chi_s):
    cdef const double[:] vr = np.ascontiguousarray(v_r, dtype=np.float64)
    cdef const double[:] vc = np.ascontiguousarray(v_c, dtype=np.float64)
    cdef const double[:, :] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef const double[:, :] cst = np.ascontiguousarray(cost, dtype=np.float64)
    cdef const double[:, :] cs = np.ascontiguousarray(chi_s, dtype=np.float64)
    cdef Py_ssize_t B = Q.shape[0], A = Q.shape[1], b, a, best
    out = np.empty(B, dtype=np.intp)
    cdef Py_ssize_t[:] o = out
    cdef double u, ubest, prod_q, prod_c
    for b in range(B):
        best = 0
        prod_q = vr[b] * Q[b, 0]
        prod_c = cst[b, 0] * vc[b]
        ubest = prod_q - prod_c
        for a in range(1, A):
            prod_q = vr[b] * Q[b, a]
            prod_c = cst[b, a] * vc[b]
            u = prod_q - prod_c
            if u > ubest or (u == ubest and (cst[b, a] < cst[b, best] or (
                    cst[b, a] == cst[b, best] and cs[b, a] > cs[b, best]))):
                best = a
                ubest = u
        o[b] = best
    return out
