"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and results match the compiled module; only speed differs.
"""
import numpy as np


def music_denominator(en, phi, omega):
    """sum_k |E_N[:, k]^H a(theta, tau)|^2 on the full grid.

    en:    (wa*ws, K) complex noise-subspace basis, row index i*ws + j
    phi:   (n_theta, wa, ws) complex antenna-domain steering factors
    omega: (n_tau, ws) complex subcarrier-domain steering factors
    """
    n_theta, wa, ws = phi.shape
    enc = np.conj(en).reshape(wa, ws, -1)
    partial = np.einsum("ijk,tij->tkj", enc, phi)
    proj = partial @ omega.T
    return np.sum(proj.real ** 2 + proj.imag ** 2, axis=1)


def _lerp(a, b, t, t1):
    """a + t (b - a), anchored at the nearer end so t = 0, t = 1 and a == b are exact."""
    return np.where(t <= 0.5, a + t * (b - a), b - t1 * (b - a))


def bilinear_upsample(src, out_h, out_w):
    """Resample every (h, w) slice of ``src`` onto an out_h x out_w grid.

    Source nodes sit at unit spacing; targets span the same extent, so the
    four corners are reproduced exactly. Columns are interpolated first on
    the small source grid, then rows; in exact arithmetic this equals the
    four-weight bilinear form, and in floating point it keeps constant
    fields exact.
    """
    src = np.asarray(src, dtype=float)
    _, h, w = src.shape
    r = np.linspace(0.0, h - 1.0, out_h)
    c = np.linspace(0.0, w - 1.0, out_w)
    r1 = np.minimum(np.floor(r), h - 2).astype(int)
    c1 = np.minimum(np.floor(c), w - 2).astype(int)
    # (C, h, out_w): every source row resampled along the columns
    cols = _lerp(src[:, :, c1], src[:, :, c1 + 1], c - c1, (c1 + 1) - c)
    dr2 = (r - r1)[:, None]
    dr1 = ((r1 + 1) - r)[:, None]
    return _lerp(cols[:, r1, :], cols[:, r1 + 1, :], dr2, dr1)


def best_response(v_r, v_c, q, cost, chi_s):
    """Row-wise argmax of v_r*q - cost*v_c with the follower's tie rule.

    All arrays are (B, A) except v_r and v_c, which are (B,). Ties go to the
    smaller cost, then the larger chi_s, then the lower index.
    """
    u = v_r[:, None] * q - cost * v_c[:, None]
    best = u.max(axis=1, keepdims=True)
    c1 = u == best
    cmin = np.where(c1, cost, np.inf).min(axis=1, keepdims=True)
    c2 = c1 & (cost == cmin)
    smax = np.where(c2, chi_s, -np.inf).max(axis=1, keepdims=True)
    c3 = c2 & (chi_s == smax)
    return np.argmax(c3, axis=1).astype(np.intp)
