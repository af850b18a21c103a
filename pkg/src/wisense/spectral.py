"""Path-count and (AoA, ToF) estimation from one receiver's CSI stream.

Pipeline: sliding-window smoothing of each frame, sample correlation,
Hermitian eigendecomposition, MDL source count, 2-D MUSIC pseudo-spectrum,
peak picking, then an optional least-squares refinement of the peaks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage, optimize

from . import kernels
from .channel import SPEED_OF_LIGHT, CsiStream, Scene, path_csi


class NoNoiseSubspaceError(ValueError):
    """The source count fills the whole space; MUSIC has nothing to project on."""


@dataclass
class SmoothedSnapshot:
    """Columns are vectorized (wa x ws) windows, row index i*ws + j.

    ``origins[c]`` is the (antenna, subcarrier) corner of column c.
    """

    X: np.ndarray
    sub_dims: tuple[int, int]
    frame_dims: tuple[int, int]
    origins: np.ndarray


@dataclass
class SubspaceDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    L: int
    mdl: np.ndarray = field(repr=False, default=None)

    @property
    def signal_basis(self) -> np.ndarray:
        return self.eigenvectors[:, :self.L]

    @property
    def noise_basis(self) -> np.ndarray:
        return self.eigenvectors[:, self.L:]


@dataclass(frozen=True)
class EstimationGrid:
    theta_min_deg: float = -90.0
    theta_max_deg: float = 90.0
    theta_step_deg: float = 1.0
    tau_min_ns: float = 0.0
    tau_max_ns: float = 200.0
    tau_step_ns: float = 1.0

    @property
    def thetas(self) -> np.ndarray:
        n = int(round((self.theta_max_deg - self.theta_min_deg) / self.theta_step_deg)) + 1
        return np.deg2rad(np.linspace(self.theta_min_deg, self.theta_max_deg, n))

    @property
    def taus(self) -> np.ndarray:
        n = int(round((self.tau_max_ns - self.tau_min_ns) / self.tau_step_ns)) + 1
        return np.linspace(self.tau_min_ns, self.tau_max_ns, n) * 1e-9


@dataclass
class PathEstimate:
    """Spectrum peaks as (aoa rad, tof s, spectrum value), strongest first."""

    peaks: list[tuple[float, float, float]]
    grid: EstimationGrid
    L: int
    shortfall: int = 0
    spectrum: np.ndarray | None = field(default=None, repr=False)
    decomposition: SubspaceDecomposition | None = field(default=None, repr=False)

    @property
    def aoas(self) -> np.ndarray:
        return np.array([p[0] for p in self.peaks])

    @property
    def tofs(self) -> np.ndarray:
        return np.array([p[1] for p in self.peaks])


def default_sub_dims(n_antennas: int, n_subcarriers: int) -> tuple[int, int]:
    """Half the antennas and 16 subcarriers per window, clamped to [2, size]."""
    wa = min(max(n_antennas // 2, 2), n_antennas)
    ws = min(max(16, 2), n_subcarriers)
    return wa, ws


def spatial_smooth(frame: np.ndarray, sub_dims: tuple[int, int]) -> SmoothedSnapshot:
    frame = np.asarray(frame)
    M, N = frame.shape
    wa, ws = sub_dims
    if wa < 2 or ws < 2:
        raise ValueError(f"window dims must be >= 2, got {sub_dims}")
    if wa > M or ws > N:
        raise ValueError(f"window {sub_dims} larger than frame {(M, N)}")
    win = sliding_window_view(frame, (wa, ws))
    n_p, n_s = win.shape[:2]
    X = win.reshape(n_p * n_s, wa * ws).T
    origins = np.stack(np.meshgrid(np.arange(n_p), np.arange(n_s), indexing="ij"), -1).reshape(-1, 2)
    return SmoothedSnapshot(np.ascontiguousarray(X), (wa, ws), (M, N), origins)


def correlation_matrix(snapshots: list[SmoothedSnapshot]) -> np.ndarray:
    """Average outer product over all columns of all snapshots."""
    if not snapshots:
        raise ValueError("need at least one snapshot")
    shape = snapshots[0].X.shape
    R = np.zeros((shape[0], shape[0]), dtype=complex)
    for snap in snapshots:
        if snap.X.shape != shape:
            raise ValueError(f"snapshot shape {snap.X.shape} != {shape}")
        R += snap.X @ snap.X.conj().T
    R /= len(snapshots) * shape[1]
    return (R + R.conj().T) / 2


def eig_hermitian(R: np.ndarray, tol: float = 1e-10):
    """Eigenvalues (descending) and orthonormal eigenvectors of a Hermitian matrix."""
    R = np.asarray(R)
    scale = max(np.linalg.norm(R), np.finfo(float).tiny)
    if np.linalg.norm(R - R.conj().T) > tol * scale:
        raise ValueError("matrix is not Hermitian within tolerance")
    w, V = np.linalg.eigh((R + R.conj().T) / 2)
    return w[::-1].copy(), V[:, ::-1].copy()


def mdl_criterion(eigenvalues, n_obs: float) -> np.ndarray:
    """MDL(L) for L = 0 .. M'-1.

    Eigenvalues below 1e-12 of the largest are raised to that floor so that
    noiseless data does not produce log(0).
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size < 2:
        raise ValueError("need at least two eigenvalues")
    if n_obs < 2:
        raise ValueError("need at least two observations")
    lam = np.maximum(lam, 1e-12 * max(lam[0], np.finfo(float).tiny))
    Mp = lam.size
    out = np.empty(Mp)
    for L in range(Mp):
        tail = lam[L:]
        k = Mp - L
        log_ratio = np.mean(np.log(tail)) - np.log(np.mean(tail))
        out[L] = -k * n_obs * log_ratio + 0.5 * L * (2 * Mp - L) * np.log(n_obs)
    return out


def mdl_order(eigenvalues, dim: int, U: float) -> int:
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size != dim:
        raise ValueError(f"expected {dim} eigenvalues, got {lam.size}")
    return int(np.argmin(mdl_criterion(lam, U)))


def decompose(R: np.ndarray, n_obs: float, L: int | None = None) -> SubspaceDecomposition:
    lam, V = eig_hermitian(R)
    mdl = mdl_criterion(lam, n_obs)
    if L is None:
        L = int(np.argmin(mdl))
    return SubspaceDecomposition(lam, V, L, mdl)


def steering_factors(thetas, taus, scene: Scene, sub_dims: tuple[int, int]):
    """Antenna-domain (n_theta, wa, ws) and subcarrier-domain (n_tau, ws) factors.

    The AoA phase uses the window-averaged subcarrier frequencies, which keeps
    the steering vector centred among the sliding windows.
    """
    wa, ws = sub_dims
    df = scene.subcarrier_spacing
    fbar = scene.frequencies.mean() + (np.arange(ws) - (ws - 1) / 2) * df
    i = np.arange(wa)[:, None]
    sin_t = np.sin(np.atleast_1d(thetas))[:, None, None]
    phi = np.exp(-2j * np.pi * fbar[None, None, :] * i[None] * scene.antenna_spacing
                 * sin_t / SPEED_OF_LIGHT)
    omega = np.exp(-2j * np.pi * np.arange(ws)[None, :] * df * np.atleast_1d(taus)[:, None])
    return phi, omega


def steering_vector(theta: float, tau: float, scene: Scene, sub_dims: tuple[int, int]) -> np.ndarray:
    phi, omega = steering_factors(theta, tau, scene, sub_dims)
    return (phi[0] * omega[0][None, :]).reshape(-1)


def music_spectrum(noise_basis: np.ndarray, grid: EstimationGrid, scene: Scene,
                   sub_dims: tuple[int, int]) -> np.ndarray:
    """Pseudo-spectrum 1 / (a^H E_N E_N^H a); rows are AoA, columns ToF."""
    if noise_basis.ndim != 2 or noise_basis.shape[1] == 0:
        raise NoNoiseSubspaceError("noise subspace is empty (L equals the subspace dimension)")
    phi, omega = steering_factors(grid.thetas, grid.taus, scene, sub_dims)
    denom = kernels.music_denominator(noise_basis, phi, omega)
    return 1.0 / np.maximum(denom, np.finfo(float).tiny)


def peak_estimates(spectrum: np.ndarray, grid: EstimationGrid, L: int) -> PathEstimate:
    """The L largest 8-neighbourhood local maxima; ties go to smaller (AoA, ToF).

    Cells inside a flat plateau (equal to every neighbour) do not count.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    local = ((ndimage.maximum_filter(spectrum, size=3, mode="nearest") == spectrum)
             & (ndimage.minimum_filter(spectrum, size=3, mode="nearest") < spectrum))
    rows, cols = np.nonzero(local)
    order = sorted(range(rows.size), key=lambda k: (-spectrum[rows[k], cols[k]], rows[k], cols[k]))
    thetas, taus = grid.thetas, grid.taus
    peaks = [(float(thetas[rows[k]]), float(taus[cols[k]]), float(spectrum[rows[k], cols[k]]))
             for k in order[:L]]
    return PathEstimate(peaks, grid, L, shortfall=max(L - len(peaks), 0), spectrum=spectrum)


@dataclass(frozen=True)
class EstimatorConfig:
    grid: EstimationGrid = EstimationGrid()
    sub_dims: tuple[int, int] | None = None
    # "frames" counts CSI frames, "windows" counts every smoothed column
    mdl_observations: str = "frames"
    refine: bool = True
    max_paths: int | None = None


def estimate_paths(stream: CsiStream, scene: Scene, config: EstimatorConfig = EstimatorConfig(),
                   L: int | None = None) -> PathEstimate:
    """Full estimation chain for one receiver; ``L`` overrides MDL when given."""
    M, N = stream.shape
    sub_dims = config.sub_dims or default_sub_dims(M, N)
    snaps = [spatial_smooth(f, sub_dims) for f in stream.frames]
    R = correlation_matrix(snaps)
    if config.mdl_observations == "frames":
        n_obs = stream.n_frames
    elif config.mdl_observations == "windows":
        n_obs = stream.n_frames * snaps[0].X.shape[1]
    else:
        raise ValueError(f"unknown mdl_observations {config.mdl_observations!r}")
    dec = decompose(R, max(n_obs, 2), L)
    if config.max_paths is not None and dec.L > config.max_paths:
        dec = SubspaceDecomposition(dec.eigenvalues, dec.eigenvectors, config.max_paths, dec.mdl)
    if dec.L == 0:
        return PathEstimate([], config.grid, 0, decomposition=dec)
    P = music_spectrum(dec.noise_basis, config.grid, scene, sub_dims)
    est = peak_estimates(P, config.grid, dec.L)
    est.decomposition = dec
    if config.refine and est.peaks:
        est = refine_paths(stream, est, scene)
    return est


def _projection_residual(params, Y, scene: Scene):
    n = params.size // 2
    freqs = scene.frequencies
    cols = [path_csi(freqs, scene.n_antennas, scene.antenna_spacing,
                     params[2 * l], params[2 * l + 1] * 1e-9).reshape(-1) for l in range(n)]
    A = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    r = Y - A @ coef
    return np.concatenate([r.real.ravel(), r.imag.ravel()])


def refine_paths(stream: CsiStream, estimate: PathEstimate, scene: Scene) -> PathEstimate:
    """Least-squares polish of the MUSIC peaks.

    Complex path gains are free per frame (they absorb the oscillator phase),
    so only AoA and ToF are searched. Spectrum values are kept from the grid.
    """
    Y = stream.frames.reshape(stream.n_frames, -1).T
    x0 = np.concatenate([[th, tau * 1e9] for th, tau, _ in estimate.peaks])
    lo = np.tile([-np.pi / 2, estimate.grid.tau_min_ns - 5.0], len(estimate.peaks))
    hi = np.tile([np.pi / 2, estimate.grid.tau_max_ns + 5.0], len(estimate.peaks))
    x0 = np.clip(x0, lo + 1e-9, hi - 1e-9)
    sol = optimize.least_squares(_projection_residual, x0, args=(Y, scene), bounds=(lo, hi),
                                 x_scale=np.tile([0.01, 0.1], len(estimate.peaks)),
                                 xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=200)
    peaks = [(float(sol.x[2 * l]), float(sol.x[2 * l + 1] * 1e-9), estimate.peaks[l][2])
             for l in range(len(estimate.peaks))]
    return PathEstimate(peaks, estimate.grid, estimate.L, estimate.shortfall,
                        estimate.spectrum, estimate.decomposition)
