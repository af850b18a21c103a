"""Time the compiled kernels against their numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``. Each kernel is
fed inputs shaped like the calls the package makes, and both backends are
checked for agreement.
"""
import argparse
import timeit

import numpy as np

from wisense import _fallback

try:
    from wisense import _kernels
except ImportError:  # extension not built
    _kernels = None


def music_inputs(rng):
    # 2x16 smoothing window, 181 angles, 201 delays, 30-dim noise subspace
    wa, ws, K = 2, 16, 30
    en = np.linalg.qr(rng.normal(size=(wa * ws, K)) + 1j * rng.normal(size=(wa * ws, K)))[0]
    phi = np.exp(1j * rng.uniform(0, 2 * np.pi, (181, wa, ws)))
    omega = np.exp(1j * rng.uniform(0, 2 * np.pi, (201, ws)))
    return en, phi, omega


def upsample_inputs(rng):
    return rng.normal(size=(150, 3, 3)), 144, 144


def best_response_inputs(rng):
    B, A = 121, 77  # price grid rows by allocation table
    return (rng.uniform(0, 60, B), np.full(B, 30.0), rng.uniform(0, 120, (B, A)),
            rng.integers(0, 101, (B, A)).astype(float), rng.integers(0, 14, (B, A)).astype(float))


CASES = {
    "music_denominator": music_inputs,
    "bilinear_upsample": upsample_inputs,
    "best_response": best_response_inputs,
}


def bench(repeat: int):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}  agree")
    for name, make in CASES.items():
        args = make(rng)
        fb = getattr(_fallback, name)
        t_fb = min(timeit.repeat(lambda: fb(*args), number=1, repeat=repeat)) * 1e3
        if _kernels is None:
            print(f"{name:<20}{t_fb:>12.3f}{'n/a':>14}{'':>10}  -")
            continue
        ck = getattr(_kernels, name)
        t_ck = min(timeit.repeat(lambda: ck(*args), number=1, repeat=repeat)) * 1e3
        a, b = fb(*args), ck(*args)
        agree = np.array_equal(a, b) or np.allclose(a, b, rtol=1e-12, atol=0)
        print(f"{name:<20}{t_fb:>12.3f}{t_ck:>14.3f}{t_fb / t_ck:>10.1f}x  {agree}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    bench(ap.parse_args().repeat)
