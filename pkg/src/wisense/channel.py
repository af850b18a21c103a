"""Scene geometry, ground-truth propagation paths and CSI synthesis.

All geometry is planar. Angles of arrival are measured from the broadside of
each receiver's uniform linear array and folded into [-pi/2, pi/2], which is
the range a ULA can observe.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

PATH_KINDS = ("direct", "user_reflection", "static_reflection")


class DegenerateGeometryError(ValueError):
    """Raised when the scene geometry makes a path undefined."""


@dataclass(frozen=True)
class ReceiverSpec:
    pos: tuple[float, float]
    array_orientation: float = 0.0
    id: int = 0


@dataclass(frozen=True)
class Scene:
    """One perception deployment: the node geometry plus its radio setup.

    ``antenna_spacing`` defaults to half a wavelength at ``f_center``.
    ``reflectors`` are optional static scatterers, each adding one
    ``static_reflection`` path per receiver.
    """

    tx_pos: tuple[float, float]
    rx: tuple[ReceiverSpec, ...]
    user_pos: tuple[float, float]
    f_center: float = 5.805e9
    bandwidth: float = 80e6
    n_subcarriers: int = 256
    n_antennas: int = 3
    antenna_spacing: float | None = None
    packet_rate: float = 100.0
    gain: float = 1.0
    reflection_gain: float = 1.0
    include_direct: bool = True
    reflectors: tuple[tuple[float, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "rx", tuple(self.rx))
        object.__setattr__(self, "reflectors", tuple(tuple(r) for r in self.reflectors))
        if self.antenna_spacing is None:
            object.__setattr__(self, "antenna_spacing", SPEED_OF_LIGHT / self.f_center / 2)
        if self.n_subcarriers < 2:
            raise ValueError("n_subcarriers must be >= 2")
        if self.n_antennas < 2:
            raise ValueError("n_antennas must be >= 2")
        if self.antenna_spacing <= 0:
            raise ValueError("antenna_spacing must be positive")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if not self.rx:
            raise ValueError("scene needs at least one receiver")
        ids = [r.id for r in self.rx]
        if len(set(ids)) != len(ids):
            raise ValueError(f"receiver ids must be unique, got {ids}")

    @property
    def frequencies(self) -> np.ndarray:
        """Subcarrier frequencies, uniformly spanning the band edges."""
        half = self.bandwidth / 2
        return np.linspace(self.f_center - half, self.f_center + half, self.n_subcarriers)

    @property
    def subcarrier_spacing(self) -> float:
        return self.bandwidth / (self.n_subcarriers - 1)

    def receiver(self, rx_id: int) -> ReceiverSpec:
        for r in self.rx:
            if r.id == rx_id:
                return r
        raise KeyError(rx_id)


@dataclass(frozen=True)
class PathSpec:
    aoa: float
    tof: float
    attenuation: complex
    kind: str

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise ValueError(f"unknown path kind {self.kind!r}")
        if abs(self.aoa) > np.pi / 2 + 1e-12:
            raise ValueError(f"aoa {self.aoa} outside [-pi/2, pi/2]")
        if self.tof < 0:
            raise ValueError("tof must be non-negative")


@dataclass
class CsiStream:
    """U frames of M x N CSI captured by one receiver.

    ``phase_error`` holds the common per-frame oscillator phase that was
    applied during capture; a calibration antenna measures it on hardware.
    """

    frames: np.ndarray
    timestamps: np.ndarray
    receiver_id: int
    phase_error: np.ndarray
    noise_var: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (U, M, N) with U >= 1, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def arrival_angle(source, rx: ReceiverSpec) -> float:
    """AoA of a far-field source at ``rx``, relative to broadside, folded to +-pi/2."""
    bearing = np.arctan2(source[1] - rx.pos[1], source[0] - rx.pos[0])
    rel = bearing - rx.array_orientation
    # a ULA cannot tell front from back
    return float(np.arcsin(np.clip(np.sin(rel), -1.0, 1.0)))


def ground_truth_paths(scene: Scene, seed: int | None = None) -> dict[int, list[PathSpec]]:
    """Propagation paths per receiver, keyed by receiver id.

    Attenuation is ``g / d_total * exp(j*phi0)``. With ``seed=None`` every
    initial phase is zero. The user reflection shares one initial phase across
    receivers (a single scatterer illuminated by one transmitter); direct and
    static paths draw independent phases.
    """
    rng = np.random.default_rng(seed) if seed is not None else None

    def phase():
        return 0.0 if rng is None else float(rng.uniform(0, 2 * np.pi))

    user_phase = phase()
    d_tx_user = _dist(scene.tx_pos, scene.user_pos)
    out: dict[int, list[PathSpec]] = {}
    for rx in scene.rx:
        paths = []
        if scene.include_direct:
            d = _dist(scene.tx_pos, rx.pos)
            if d < 1e-9:
                raise DegenerateGeometryError(f"transmitter collocated with receiver {rx.id}")
            paths.append(PathSpec(arrival_angle(scene.tx_pos, rx), d / SPEED_OF_LIGHT,
                                  scene.gain / d * np.exp(1j * phase()), "direct"))
        d_user_rx = _dist(scene.user_pos, rx.pos)
        if d_user_rx < 1e-2:
            raise DegenerateGeometryError(f"user collocated with receiver {rx.id}")
        d = d_tx_user + d_user_rx
        paths.append(PathSpec(arrival_angle(scene.user_pos, rx), d / SPEED_OF_LIGHT,
                              scene.gain * scene.reflection_gain / d * np.exp(1j * user_phase),
                              "user_reflection"))
        for refl in scene.reflectors:
            d_r = _dist(refl, rx.pos)
            if d_r < 1e-2:
                raise DegenerateGeometryError(f"reflector collocated with receiver {rx.id}")
            d = _dist(scene.tx_pos, refl) + d_r
            paths.append(PathSpec(arrival_angle(refl, rx), d / SPEED_OF_LIGHT,
                                  scene.gain * scene.reflection_gain / d * np.exp(1j * phase()),
                                  "static_reflection"))
        out[rx.id] = paths
    return out


def path_csi(freqs: np.ndarray, n_antennas: int, spacing: float, aoa: float, tof: float,
             attenuation: complex = 1.0) -> np.ndarray:
    """Noiseless M x N CSI of a single path."""
    m = np.arange(n_antennas)[:, None]
    delay = tof + m * spacing * np.sin(aoa) / SPEED_OF_LIGHT
    return attenuation * np.exp(-2j * np.pi * freqs[None, :] * delay)


def noiseless_csi(scene: Scene, paths: Sequence[PathSpec]) -> np.ndarray:
    freqs = scene.frequencies
    h = np.zeros((scene.n_antennas, scene.n_subcarriers), dtype=complex)
    for p in paths:
        h += path_csi(freqs, scene.n_antennas, scene.antenna_spacing, p.aoa, p.tof, p.attenuation)
    return h


def noise_var_for_snr(scene: Scene, paths: Sequence[PathSpec], snr_db: float) -> float:
    """Noise variance giving ``snr_db`` relative to the mean noiseless CSI power."""
    power = float(np.mean(np.abs(noiseless_csi(scene, paths)) ** 2))
    return power / 10 ** (snr_db / 10)


def synthesize_csi(scene: Scene, paths: dict[int, Sequence[PathSpec]],
                   noise_var: float | dict[int, float] = 0.0,
                   phase_error="uniform", U: int = 34, seed: int = 0) -> dict[int, CsiStream]:
    """Synthesize U noisy CSI frames for every receiver.

    ``phase_error`` is ``"uniform"`` (per-frame uniform in [0, 2pi), independent
    per receiver), ``"none"``, or an explicit array of U radians. Each receiver
    gets its own child generator spawned from ``seed`` so streams can be built
    in any order.
    """
    if U < 1:
        raise ValueError("U must be >= 1")
    rx_ids = [r.id for r in scene.rx]
    children = np.random.SeedSequence(seed).spawn(len(rx_ids))
    out = {}
    for rx_id, ss in zip(rx_ids, children):
        sigma2 = noise_var[rx_id] if isinstance(noise_var, dict) else noise_var
        if sigma2 < 0:
            raise ValueError("noise_var must be non-negative")
        rng = np.random.default_rng(ss)
        if isinstance(phase_error, str):
            if phase_error == "uniform":
                eps = rng.uniform(0, 2 * np.pi, size=U)
            elif phase_error == "none":
                eps = np.zeros(U)
            else:
                raise ValueError(f"unknown phase_error model {phase_error!r}")
        else:
            eps = np.asarray(phase_error, dtype=float)
            if eps.shape != (U,):
                raise ValueError(f"phase_error must have shape ({U},)")
        clean = noiseless_csi(scene, paths[rx_id])
        frames = clean[None] * np.exp(-1j * eps)[:, None, None]
        shape = (U,) + clean.shape
        noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        frames = frames + np.sqrt(sigma2 / 2) * noise
        out[rx_id] = CsiStream(frames=frames, timestamps=np.arange(U) / scene.packet_rate,
                               receiver_id=rx_id, phase_error=eps, noise_var=float(sigma2))
    return out


def cancel_phase_error(stream: CsiStream) -> CsiStream:
    """Remove the recorded per-frame phase error (what the calibration antenna does)."""
    frames = stream.frames * np.exp(1j * stream.phase_error)[:, None, None]
    return CsiStream(frames=frames, timestamps=stream.timestamps, receiver_id=stream.receiver_id,
                     phase_error=np.zeros_like(stream.phase_error), noise_var=stream.noise_var)
