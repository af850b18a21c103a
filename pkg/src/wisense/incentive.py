"""Pricing game between a user (leader) and the service provider (follower).

The provider sells perception plus generated content. Resources are quantized:
every access point used for perception costs 2 units, skeleton prediction
costs 1 unit whenever any AP is used, and each generation inference step
costs 2 units.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

UNITS_PER_AP = 2
UNITS_SKELETON = 1
UNITS_PER_STEP = 2

# calibration endpoints: accuracy at 1 and 5 APs, image scores at 1 and 10 steps
PERCEPTION_POINTS = ((1, 5.7), (5, 23.5))
TV_POINTS = ((1, 78.0), (10, 32.0))
BRISQUE_POINTS = ((1, 55.0), (10, 3.0))


def saturating(x, a: float, b: float):
    """a*x / (b + x), zero for x <= 0."""
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    return a * x / (b + x)


def fit_saturating(x1: float, y1: float, x2: float, y2: float) -> tuple[float, float]:
    """Parameters (a, b) of a*x/(b+x) passing through two points."""
    # y1 (b + x1) = a x1 and y2 (b + x2) = a x2
    b = x1 * x2 * (y2 - y1) / (y1 * x2 - y2 * x1)
    a = y1 * (b + x1) / x1
    if a <= 0 or b <= 0:
        raise ValueError("calibration points do not admit an increasing saturating curve")
    return float(a), float(b)


def _quality_gain_params(points, shape: float) -> tuple[float, float]:
    """Curve for (score at 1 step) - (score at s steps) versus s - 1 extra steps."""
    (s1, y1), (s2, y2) = points
    gain = y1 - y2
    x = s2 - s1
    return gain * (shape + x) / x, shape


@dataclass(frozen=True)
class QosMappings:
    """Saturating resource-to-QoS curves.

    Perception accuracy is a function of AP count. The two image-quality terms
    are expressed as improvements over a single inference step, so they are
    0 at 0 and 1 steps and increase with further steps.
    """

    a_s: float
    b_s: float
    a_brq: float
    b_brq: float
    a_tv: float
    b_tv: float

    @classmethod
    def calibrated(cls, quality_shape: float = 0.5) -> "QosMappings":
        (x1, y1), (x2, y2) = PERCEPTION_POINTS
        a_s, b_s = fit_saturating(x1, y1, x2, y2)
        a_brq, b_brq = _quality_gain_params(BRISQUE_POINTS, quality_shape)
        a_tv, b_tv = _quality_gain_params(TV_POINTS, quality_shape)
        return cls(a_s, b_s, a_brq, b_brq, a_tv, b_tv)

    @classmethod
    def zero(cls) -> "QosMappings":
        return cls(0.0, 1.0, 0.0, 1.0, 0.0, 1.0)

    def perception(self, aps):
        return saturating(aps, self.a_s, self.b_s)

    def brisque_gain(self, steps):
        return saturating(np.asarray(steps) - 1, self.a_brq, self.b_brq)

    def tv_gain(self, steps):
        return saturating(np.asarray(steps) - 1, self.a_tv, self.b_tv)

    def as_vector(self) -> np.ndarray:
        return np.array([self.a_s, self.b_s, self.a_brq, self.b_brq, self.a_tv, self.b_tv])


@dataclass(frozen=True)
class EnvState:
    maps: QosMappings = field(default_factory=QosMappings.calibrated)
    v_c: float = 30.0
    v_m: float = 45.0
    E_t: int = 100
    U_th: float = 3500.0
    max_aps: int = 6
    max_steps: int = 10

    def __post_init__(self):
        if self.v_c <= 0 or self.v_m <= 0:
            raise ValueError("v_c and v_m must be positive")
        if self.E_t < 0 or self.U_th < 0:
            raise ValueError("E_t and U_th must be non-negative")
        if self.max_aps < 0 or self.max_steps < 0:
            raise ValueError("max_aps and max_steps must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvState":
        d = dict(d)
        if "maps" in d and isinstance(d["maps"], dict):
            d["maps"] = QosMappings(**d["maps"])
        return cls(**d)


@dataclass(frozen=True)
class PricingStrategy:
    v_r: float
    I_b: float

    def __post_init__(self):
        if self.v_r < 0 or self.I_b < 0:
            raise ValueError("prices must be non-negative")


@dataclass(frozen=True)
class Allocation:
    chi_s: int
    chi_ag: int

    def __post_init__(self):
        if self.chi_s < 0 or self.chi_ag < 0:
            raise ValueError("allocations must be non-negative")
        if self.chi_s not in (0,) and (self.chi_s - UNITS_SKELETON) % UNITS_PER_AP:
            raise ValueError(f"chi_s={self.chi_s} is not a whole number of APs plus skeleton")
        if self.chi_ag % UNITS_PER_STEP:
            raise ValueError(f"chi_ag={self.chi_ag} is not a whole number of steps")

    @classmethod
    def from_counts(cls, aps: int, steps: int) -> "Allocation":
        chi_s = UNITS_PER_AP * aps + UNITS_SKELETON if aps > 0 else 0
        return cls(chi_s, UNITS_PER_STEP * steps)

    @property
    def aps(self) -> int:
        return max((self.chi_s - UNITS_SKELETON) // UNITS_PER_AP, 0)

    @property
    def steps(self) -> int:
        return self.chi_ag // UNITS_PER_STEP

    @property
    def total(self) -> int:
        return self.chi_s + self.chi_ag


def _vsp(v_r, q_t, I_b, cost, v_c):
    # one evaluation order everywhere so exact comparisons agree
    return (v_r * q_t - cost * v_c) + I_b


def total_qos(alloc: Allocation, maps: QosMappings) -> tuple[float, float, float]:
    q_s = float(maps.perception(alloc.aps))
    q_ag = float(maps.brisque_gain(alloc.steps) + maps.tv_gain(alloc.steps))
    return q_s, q_ag, q_s + q_ag


def vsp_utility(s: PricingStrategy, alloc: Allocation, env: EnvState) -> float:
    q_t = total_qos(alloc, env.maps)[2]
    return _vsp(s.v_r, q_t, s.I_b, alloc.total, env.v_c)


def user_utility(s: PricingStrategy, alloc: Allocation, env: EnvState) -> float:
    q_t = total_qos(alloc, env.maps)[2]
    return (env.v_m - s.v_r) * q_t - s.I_b


def allocation_table(env: EnvState):
    """Every quantized allocation within budget.

    Returns (aps, steps, chi_s, cost, q_t) arrays, one entry per allocation.
    """
    aps = np.arange(env.max_aps + 1)
    steps = np.arange(env.max_steps + 1)
    A, S = np.meshgrid(aps, steps, indexing="ij")
    A, S = A.ravel(), S.ravel()
    chi_s = np.where(A > 0, UNITS_PER_AP * A + UNITS_SKELETON, 0)
    cost = chi_s + UNITS_PER_STEP * S
    keep = cost <= env.E_t
    A, S, chi_s, cost = A[keep], S[keep], chi_s[keep], cost[keep]
    q = env.maps.perception(A) + (env.maps.brisque_gain(S) + env.maps.tv_gain(S))
    return A, S, chi_s, cost, q


def vsp_best_response(s: PricingStrategy, env: EnvState) -> Allocation:
    """Utility-maximizing allocation; ties go to fewer total units, then more chi_s."""
    A, S, chi_s, cost, q = allocation_table(env)
    idx = kernels.best_response(np.array([s.v_r]), np.array([env.v_c]), q[None, :],
                                cost.astype(float), chi_s.astype(float))[0]
    return Allocation.from_counts(int(A[idx]), int(S[idx]))


@dataclass(frozen=True)
class PricingGrid:
    v_r_max: float = 60.0
    v_r_step: float = 0.5
    I_b_max: float = 30.0
    I_b_step: float = 0.5

    @property
    def v_r_values(self) -> np.ndarray:
        return np.round(np.arange(0, self.v_r_max + self.v_r_step / 2, self.v_r_step), 10)

    @property
    def I_b_values(self) -> np.ndarray:
        return np.round(np.arange(0, self.I_b_max + self.I_b_step / 2, self.I_b_step), 10)


@dataclass(frozen=True)
class OracleResult:
    feasible: bool
    strategy: PricingStrategy | None = None
    allocation: Allocation | None = None
    U_us: float = float("nan")
    U_vsp: float = float("nan")

    def to_record(self) -> dict:
        if not self.feasible:
            return {"feasible": False, "v_r": None, "I_b": None, "chi_s_units": None,
                    "chi_ag_units": None, "U_us": None, "U_vsp": None}
        return {"feasible": True, "v_r": self.strategy.v_r, "I_b": self.strategy.I_b,
                "chi_s_units": self.allocation.chi_s, "chi_ag_units": self.allocation.chi_ag,
                "U_us": self.U_us, "U_vsp": self.U_vsp}


def oracle_optimal_pricing(env: EnvState, grid: PricingGrid = PricingGrid()) -> OracleResult:
    """Exhaustive leader search over the pricing grid.

    The follower's best response depends on v_r only (I_b shifts its utility
    uniformly), so it is computed once per price. Among feasible grid points
    the first in (v_r, I_b) row-major order wins ties.
    """
    v_r = grid.v_r_values
    I_b = grid.I_b_values
    A, S, chi_s, cost, q = allocation_table(env)
    idx = kernels.best_response(v_r, np.full(v_r.shape, env.v_c),
                                np.broadcast_to(q, (v_r.size, q.size)),
                                cost.astype(float), chi_s.astype(float))
    q_best = q[idx]
    cost_best = cost[idx]
    u_vsp = _vsp(v_r[:, None], q_best[:, None], I_b[None, :], cost_best[:, None], env.v_c)
    u_us = ((env.v_m - v_r) * q_best)[:, None] - I_b[None, :]
    feasible = u_vsp >= env.U_th
    if not feasible.any():
        return OracleResult(False)
    masked = np.where(feasible, u_us, -np.inf)
    i, j = np.unravel_index(int(np.argmax(masked)), masked.shape)
    alloc = Allocation.from_counts(int(A[idx[i]]), int(S[idx[i]]))
    return OracleResult(True, PricingStrategy(float(v_r[i]), float(I_b[j])), alloc,
                        float(u_us[i, j]), float(u_vsp[i, j]))


def check_constraints(s: PricingStrategy, alloc: Allocation, env: EnvState) -> list[str]:
    """Names of the leader-follower constraints violated by (s, alloc); empty if none."""
    bad = []
    br = vsp_best_response(s, env)
    if vsp_utility(s, alloc, env) < vsp_utility(s, br, env):
        bad.append("best_response")
    if alloc.total > env.E_t:
        bad.append("budget")
    if vsp_utility(s, alloc, env) < env.U_th:
        bad.append("threshold")
    return bad


def evaluate_batch(v_r: np.ndarray, I_b: np.ndarray, envs: list[EnvState]):
    """Best responses and utilities for one strategy per environment.

    Returns dict of arrays: q_t, cost, u_vsp, u_us, aps, steps.
    """
    B = len(envs)
    tables = [allocation_table(e) for e in envs]
    width = max(t[0].size for t in tables)
    # padding slots can never win: zero QoS at infinite cost
    Q = np.zeros((B, width))
    cost = np.full((B, width), np.inf)
    chi_s = np.zeros((B, width))
    aps = np.zeros((B, width), dtype=int)
    steps = np.zeros((B, width), dtype=int)
    for b, (A, S, cs, c, q) in enumerate(tables):
        n = A.size
        Q[b, :n], cost[b, :n], chi_s[b, :n] = q, c, cs
        aps[b, :n], steps[b, :n] = A, S
    v_c = np.array([e.v_c for e in envs])
    idx = kernels.best_response(v_r, v_c, Q, cost, chi_s)
    rows = np.arange(B)
    q_t = Q[rows, idx]
    c_t = cost[rows, idx]
    v_m = np.array([e.v_m for e in envs])
    return {
        "q_t": q_t,
        "cost": c_t,
        "u_vsp": _vsp(v_r, q_t, I_b, c_t, v_c),
        "u_us": (v_m - v_r) * q_t - I_b,
        "aps": aps[rows, idx],
        "steps": steps[rows, idx],
    }
