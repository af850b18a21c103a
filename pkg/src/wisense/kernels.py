"""Hot-loop dispatch: the compiled extension when built, numpy otherwise.

Set ``WISENSE_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

import numpy as np

from . import _fallback

if os.environ.get("WISENSE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"


def music_denominator(en, phi, omega):
    # a dense complex contraction: BLAS beats the compiled loop here, so both
    # backends use it (see benchmarks/bench_kernels.py)
    return _fallback.music_denominator(en, phi, omega)


def bilinear_upsample(src, out_h: int, out_w: int):
    src = np.asarray(src, dtype=float)
    if src.ndim != 3 or src.shape[1] < 2 or src.shape[2] < 2:
        raise ValueError(f"need (C, h>=2, w>=2) input, got {src.shape}")
    return _impl.bilinear_upsample(src, out_h, out_w)


def best_response(v_r, v_c, q, cost, chi_s):
    """Index of the follower's best allocation for each row of ``q``.

    ``cost`` and ``chi_s`` may be shared (A,) vectors or per-row (B, A).
    """
    q = np.asarray(q, dtype=float)
    B, A = q.shape
    cost = np.broadcast_to(np.asarray(cost, dtype=float), (B, A))
    chi_s = np.broadcast_to(np.asarray(chi_s, dtype=float), (B, A))
    v_r = np.broadcast_to(np.asarray(v_r, dtype=float), (B,))
    v_c = np.broadcast_to(np.asarray(v_c, dtype=float), (B,))
    return _impl.best_response(v_r, v_c, q, cost, chi_s)
