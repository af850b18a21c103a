"""Multi-scale perception: locate the user, then score and align every link.

Large-scale score: how close the user sits to each tx-rx line.
Small-scale score: how much the beam power toward the user fluctuates.
The CSI of each receiver is then phase-rotated so that the user reflection
adds up coherently across receivers, and merged into phase/amplitude maps.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from .channel import (SPEED_OF_LIGHT, CsiStream, DegenerateGeometryError, Scene, arrival_angle,
                      cancel_phase_error, ground_truth_paths)
from .spectral import EstimatorConfig, PathEstimate, estimate_paths

MIN_LINK_DISTANCE = 0.05


class UnderdeterminedError(ValueError):
    """Not enough independent receivers to fix the user position."""


@dataclass
class UserLocation:
    pos: tuple[float, float]
    residual: float
    # receiver id -> (aoa rad, tof s) of the peak chosen as the user reflection
    user_paths: dict[int, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.residual >= 0:
            raise ValueError("residual must be non-negative")


@dataclass
class LinkScores:
    s1: np.ndarray
    s2: np.ndarray
    receiver_ids: tuple[int, ...] = ()

    @property
    def weights(self) -> np.ndarray:
        return self.s1 + self.s2


@dataclass
class FeatureMatrix:
    h_ph: np.ndarray
    h_am: np.ndarray

    def __post_init__(self):
        if self.h_ph.shape != self.h_am.shape:
            raise ValueError("phase and amplitude maps differ in shape")


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _candidates(est: PathEstimate, rx, scene: Scene, gate_deg: float, gate_ns: float):
    """Peaks that do not look like the (known) direct path."""
    peaks = [(p[0], p[1]) for p in est.peaks]
    if not scene.include_direct or not peaks:
        return peaks
    th_d = arrival_angle(scene.tx_pos, rx)
    tau_d = np.hypot(rx.pos[0] - scene.tx_pos[0], rx.pos[1] - scene.tx_pos[1]) / SPEED_OF_LIGHT
    keep = [p for p in peaks
            if abs(np.rad2deg(p[0] - th_d)) > gate_deg or abs(p[1] - tau_d) * 1e9 > gate_ns]
    return keep or peaks


def _cost(px, py, rxs, obs, tx, tof_weight):
    """Summed squared residuals (m^2) for candidate points (px, py) of any shape."""
    total = 0.0
    d_tx = np.hypot(px - tx[0], py - tx[1])
    for rx, (th, tau) in zip(rxs, obs):
        dx, dy = px - rx.pos[0], py - rx.pos[1]
        d_rx = np.hypot(dx, dy)
        pred = np.arcsin(np.clip(np.sin(np.arctan2(dy, dx) - rx.array_orientation), -1, 1))
        r_bear = d_rx * _wrap(th - pred)
        r_ell = d_tx + d_rx - SPEED_OF_LIGHT * tau
        total = total + r_bear ** 2 + tof_weight * r_ell ** 2
    return total


def _parallel(rxs, obs) -> bool:
    dirs = [rx.array_orientation + th for rx, (th, _) in zip(rxs, obs)]
    return all(abs(np.sin(a - b)) < 1e-6 for a, b in itertools.combinations(dirs, 2))


def localize_user(estimates: Mapping[int, PathEstimate], scene: Scene, tof_weight: float = 0.1,
                  grid_step: float = 0.25, direct_gate_deg: float = 3.0,
                  direct_gate_ns: float = 5.0) -> UserLocation:
    """Least-squares user position from per-receiver peaks.

    Every combination of non-direct peaks (one per receiver) is fitted; the
    combination with the smallest residual names the user path at each
    receiver.
    """
    rxs, cands = [], []
    for rx in scene.rx:
        est = estimates.get(rx.id)
        if est is None:
            continue
        c = _candidates(est, rx, scene, direct_gate_deg, direct_gate_ns)
        if c:
            rxs.append(rx)
            cands.append(c)
    if len(rxs) < 2:
        raise UnderdeterminedError(f"need >= 2 receivers with user-path candidates, got {len(rxs)}")

    pts = np.array([scene.tx_pos] + [r.pos for r in rxs], dtype=float)
    max_tof = max(p[1] for c in cands for p in c)
    margin = max(SPEED_OF_LIGHT * max_tof / 2, 1.0)
    lo, hi = pts.min(0) - margin, pts.max(0) + margin
    step = max(grid_step, float((hi - lo).max()) / 400)
    gx = np.arange(lo[0], hi[0] + step / 2, step)
    gy = np.arange(lo[1], hi[1] + step / 2, step)
    GX, GY = np.meshgrid(gx, gy, indexing="ij")

    best = None
    for obs in itertools.product(*cands):
        if _parallel(rxs, obs):
            continue
        C = _cost(GX, GY, rxs, obs, scene.tx_pos, tof_weight)
        k = np.unravel_index(np.argmin(C), C.shape)
        x0 = np.array([GX[k], GY[k]])
        res = optimize.minimize(lambda p: _cost(p[0], p[1], rxs, obs, scene.tx_pos, tof_weight),
                                x0, method="Nelder-Mead",
                                options={"xatol": 1e-6, "fatol": 1e-12, "maxiter": 2000})
        cost = float(res.fun)
        if best is None or cost < best[0]:
            best = (cost, res.x, obs)
    if best is None:
        raise UnderdeterminedError("all bearing lines are parallel")
    cost, x, obs = best
    return UserLocation((float(x[0]), float(x[1])), float(np.sqrt(cost / len(rxs))),
                        {rx.id: (float(o[0]), float(o[1])) for rx, o in zip(rxs, obs)})


def link_distance(user_pos, tx_pos, rx_pos) -> float:
    """Perpendicular distance from the user to the line through tx and rx."""
    (xu, yu), (xt, yt), (xq, yq) = user_pos, tx_pos, rx_pos
    norm = np.hypot(yq - yt, xq - xt)
    if norm == 0:
        raise DegenerateGeometryError("transmitter and receiver coincide")
    return abs((yq - yt) * xu - (xq - xt) * yu + xq * yt - yq * xt) / norm


def large_scale_scores(user: UserLocation, scene: Scene) -> np.ndarray:
    d = np.array([link_distance(user.pos, scene.tx_pos, rx.pos) for rx in scene.rx])
    d = np.maximum(d, MIN_LINK_DISTANCE)
    return d.min() / d


def beam_weights(theta: float, scene: Scene) -> np.ndarray:
    m = np.arange(scene.n_antennas)[:, None]
    return np.exp(2j * np.pi * scene.frequencies[None, :] * m * scene.antenna_spacing
                  * np.sin(theta) / SPEED_OF_LIGHT)


def beam_power_series(stream: CsiStream, theta: float, scene: Scene) -> np.ndarray:
    w = beam_weights(theta, scene)
    return np.abs(np.einsum("mn,umn->u", w, stream.frames)) ** 2


def small_scale_scores(power_series: Sequence[np.ndarray]) -> np.ndarray:
    var = []
    for p in power_series:
        p = np.asarray(p, dtype=float)
        if p.size < 2:
            raise ValueError("need at least two frames per receiver")
        var.append(np.var(p, ddof=1))
    var = np.array(var)
    top = var.max()
    if top <= 0:
        return np.zeros_like(var)
    return var / top


def rotation_factor(theta: float, tau: float, scene: Scene) -> np.ndarray:
    m = np.arange(scene.n_antennas)[:, None]
    return np.exp(2j * np.pi * scene.frequencies[None, :]
                  * (tau + m * scene.antenna_spacing * np.sin(theta) / SPEED_OF_LIGHT))


def rotate_csi(frame: np.ndarray, theta: float, tau: float, scene: Scene) -> np.ndarray:
    """H o F; accepts one (M, N) frame or a (U, M, N) stack."""
    return np.asarray(frame) * rotation_factor(theta, tau, scene)


def build_feature_matrix(rotated: Sequence[np.ndarray], scores: LinkScores) -> FeatureMatrix:
    w = scores.weights
    if len(rotated) != len(w):
        raise ValueError(f"{len(rotated)} frames for {len(w)} scored receivers")
    shape = np.shape(rotated[0])
    h_ph = np.zeros(shape)
    h_am = np.zeros(shape)
    for wq, H in zip(w, rotated):  # fixed receiver order keeps the sum reproducible
        if np.shape(H) != shape:
            raise ValueError(f"frame shape {np.shape(H)} != {shape}")
        h_ph = h_ph + wq * np.angle(H)
        h_am = h_am + wq * np.abs(H)
    return FeatureMatrix(h_ph, h_am)


def coherence_ratio(components: Sequence[np.ndarray]) -> float:
    """sum |sum_q Z_q| / sum sum_q |Z_q| over all elements; 1 means perfectly aligned."""
    Z = np.asarray(components)
    den = np.abs(Z).sum()
    return float(np.abs(Z.sum(0)).sum() / den) if den > 0 else 1.0


def user_component_energy(user_frames: Sequence[np.ndarray], weights,
                          rotations: Sequence[np.ndarray] | None = None) -> float:
    """Energy of the score-weighted sum of noiseless user-only CSI.

    ``rotations`` are the per-receiver rotation factors, or None for no rotation.
    """
    acc = 0
    for q, (w, H) in enumerate(zip(weights, user_frames)):
        acc = acc + w * (H if rotations is None else H * rotations[q])
    return float(np.sum(np.abs(acc) ** 2))


@dataclass(frozen=True)
class SmspConfig:
    estimator: EstimatorConfig = EstimatorConfig()
    tof_weight: float = 0.1
    grid_step_m: float = 0.25
    rotate: bool = True
    # debug: rotate and score with the true user path instead of estimates
    ground_truth: bool = False


@dataclass
class SmspResult:
    location: UserLocation
    estimates: dict[int, PathEstimate]
    scores: LinkScores
    beam_angles: dict[int, float]
    rotation_params: dict[int, tuple[float, float]]
    features: list[FeatureMatrix]
    rotated: dict[int, np.ndarray] = field(repr=False, default_factory=dict)


def perceive(streams: Mapping[int, CsiStream], scene: Scene,
             config: SmspConfig = SmspConfig()) -> SmspResult:
    """Run the whole perception chain on calibrated-or-raw streams.

    Streams are phase-calibrated first. Returns one FeatureMatrix per frame.
    """
    calibrated = {q: cancel_phase_error(s) for q, s in streams.items()}
    estimates = {q: estimate_paths(s, scene, config.estimator) for q, s in calibrated.items()}
    if config.ground_truth:
        truth = ground_truth_paths(scene)
        user = {q: next((p.aoa, p.tof) for p in ps if p.kind == "user_reflection")
                for q, ps in truth.items()}
        loc = UserLocation(tuple(scene.user_pos), 0.0, user)
    else:
        loc = localize_user(estimates, scene, config.tof_weight, config.grid_step_m)

    ids = tuple(rx.id for rx in scene.rx)
    beam = {rx.id: arrival_angle(loc.pos, rx) for rx in scene.rx}
    s1 = large_scale_scores(loc, scene)
    s2 = small_scale_scores([beam_power_series(calibrated[q], beam[q], scene) for q in ids])
    scores = LinkScores(s1, s2, ids)

    params, rotated = {}, {}
    for q in ids:
        th, tau = loc.user_paths.get(q, (beam[q], 0.0))
        params[q] = (th, tau)
        frames = calibrated[q].frames
        rotated[q] = rotate_csi(frames, th, tau, scene) if config.rotate else frames
    n_frames = min(s.n_frames for s in calibrated.values())
    features = [build_feature_matrix([rotated[q][u] for q in ids], scores) for u in range(n_frames)]
    return SmspResult(loc, estimates, scores, beam, params, features, rotated)
