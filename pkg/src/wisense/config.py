"""Scenario files: TOML parsed into a strict schema.

Unknown keys and bad values raise ``ScenarioError`` whose ``details`` list
holds one {"loc": "...", "msg": "..."} entry per problem.
"""
from __future__ import annotations

import copy
import sys
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .channel import ReceiverSpec, Scene
from .dpolicy import EnvSampler, TrainConfig
from .incentive import EnvState, PricingGrid, QosMappings
from .smsp import SmspConfig
from .spectral import EstimationGrid, EstimatorConfig

BUNDLED = ("default_3rx", "ap_sweep", "economy_default")


class ScenarioError(ValueError):
    def __init__(self, details):
        self.details = details
        super().__init__("; ".join(f"{d['loc']}: {d['msg']}" for d in details))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ReceiverBlock(_Strict):
    pos_m: tuple[float, float]
    # None points the array broadside at the midpoint of tx and user
    orientation_deg: Optional[float] = None


class SceneBlock(_Strict):
    tx_pos_m: tuple[float, float] = (0.0, 0.0)
    user_pos_m: tuple[float, float] = (3.0, 4.0)
    receivers: list[ReceiverBlock] = Field(default_factory=lambda: [
        ReceiverBlock(pos_m=(6.0, 0.0)), ReceiverBlock(pos_m=(-2.0, 5.0)),
        ReceiverBlock(pos_m=(4.0, -3.0))], min_length=1)
    f_center_hz: float = Field(5.805e9, gt=0)
    bandwidth_hz: float = Field(80e6, gt=0)
    n_subcarriers: int = Field(256, ge=2)
    n_antennas: int = Field(3, ge=2)
    antenna_spacing_m: Optional[float] = Field(None, gt=0)
    packet_rate_hz: float = Field(100.0, gt=0)
    gain: float = Field(1.0, gt=0)
    reflection_gain: float = Field(1.0, gt=0)
    include_direct: bool = True
    reflectors_m: list[tuple[float, float]] = Field(default_factory=list)


class ChannelBlock(_Strict):
    snr_db: float = 20.0
    snr_sweep_db: list[float] = Field(default_factory=lambda: [10.0, 20.0, 30.0])
    n_frames: int = Field(34, ge=1)
    phase_error: Literal["uniform", "none"] = "uniform"
    n_seeds: int = Field(1, ge=1)


class EstimationBlock(_Strict):
    theta_min_deg: float = -90.0
    theta_max_deg: float = 90.0
    theta_step_deg: float = Field(1.0, gt=0)
    tau_min_ns: float = 0.0
    tau_max_ns: float = 200.0
    tau_step_ns: float = Field(1.0, gt=0)
    window: Optional[tuple[int, int]] = None
    mdl_observations: Literal["frames", "windows"] = "frames"
    refine: bool = True
    max_paths: Optional[int] = Field(None, ge=1)

    @field_validator("theta_max_deg")
    @classmethod
    def _theta_order(cls, v, info):
        if v <= info.data.get("theta_min_deg", -90.0):
            raise ValueError("theta_max_deg must exceed theta_min_deg")
        return v


class SmspBlock(_Strict):
    tof_weight: float = Field(0.1, ge=0)
    grid_step_m: float = Field(0.25, gt=0)
    rotate: bool = True
    ground_truth: bool = False


class SkeletonBlock(_Strict):
    x_range_m: tuple[float, float] = (1.5, 4.5)
    y_range_m: tuple[float, float] = (2.5, 5.5)
    n_x: int = Field(5, ge=1)
    n_y: int = Field(4, ge=1)
    ridge: float = Field(1e-3, ge=0)
    snr_db: float = 20.0


class EconomyBlock(_Strict):
    quality_shape: float = Field(0.5, gt=0)
    v_c: float = Field(30.0, gt=0)
    v_m: float = Field(45.0, gt=0)
    E_t: int = Field(100, ge=0)
    U_th: float = Field(3500.0, ge=0)
    max_aps: int = Field(6, ge=0)
    max_steps: int = Field(10, ge=0)
    v_r_max: float = Field(60.0, gt=0)
    v_r_step: float = Field(0.5, gt=0)
    I_b_max: float = Field(30.0, gt=0)
    I_b_step: float = Field(0.5, gt=0)
    ap_sweep: list[int] = Field(default_factory=list)


class TrainingBlock(_Strict):
    T: int = Field(10, ge=1)
    beta_min: float = Field(1e-3, ge=0, lt=1)
    beta_max: float = Field(0.2, ge=0, lt=1)
    batch_size: int = Field(512, ge=1)
    tau: float = Field(0.005, gt=0, le=1)
    discount: float = Field(0.95, ge=0, le=1)
    exploration_noise: float = Field(0.01, ge=0)
    lr: float = Field(1e-5, gt=0)
    critic_lr: Optional[float] = Field(None, gt=0)
    epochs: int = Field(3000, ge=1)
    critic_steps: int = Field(2, ge=1)
    hidden: int = Field(64, ge=1)
    penalty: float = Field(500.0, ge=0)
    reward_scale: float = Field(1000.0, gt=0)
    plateau_window: int = Field(0, ge=0)
    n_eval_envs: int = Field(50, ge=1)
    # env distribution ranges
    v_c_range: tuple[float, float] = (27.0, 33.0)
    v_m_range: tuple[float, float] = (46.0, 54.0)
    U_th_range: tuple[float, float] = (3200.0, 3800.0)
    max_aps_range: tuple[int, int] = (3, 6)
    a_s_scale_range: tuple[float, float] = (0.9, 1.1)


class OutputBlock(_Strict):
    dir: Optional[str] = None


class ScenarioFile(_Strict):
    name: str = "unnamed"
    scene: SceneBlock = SceneBlock()
    channel: ChannelBlock = ChannelBlock()
    estimation: EstimationBlock = EstimationBlock()
    smsp: SmspBlock = SmspBlock()
    skeleton: SkeletonBlock = SkeletonBlock()
    economy: EconomyBlock = EconomyBlock()
    training: TrainingBlock = TrainingBlock()
    output: OutputBlock = OutputBlock()

    # ---- conversions to module configs

    def build_scene(self) -> Scene:
        s = self.scene
        tx, user = s.tx_pos_m, s.user_pos_m
        mid = ((tx[0] + user[0]) / 2, (tx[1] + user[1]) / 2)
        rx = []
        for i, r in enumerate(s.receivers):
            if r.orientation_deg is None:
                o = float(np.arctan2(mid[1] - r.pos_m[1], mid[0] - r.pos_m[0]))
            else:
                o = float(np.deg2rad(r.orientation_deg))
            rx.append(ReceiverSpec(tuple(r.pos_m), o, i))
        return Scene(tuple(tx), tuple(rx), tuple(user), s.f_center_hz, s.bandwidth_hz,
                     s.n_subcarriers, s.n_antennas, s.antenna_spacing_m, s.packet_rate_hz, s.gain,
                     s.reflection_gain, s.include_direct, tuple(map(tuple, s.reflectors_m)))

    def estimator_config(self) -> EstimatorConfig:
        e = self.estimation
        grid = EstimationGrid(e.theta_min_deg, e.theta_max_deg, e.theta_step_deg,
                              e.tau_min_ns, e.tau_max_ns, e.tau_step_ns)
        return EstimatorConfig(grid, tuple(e.window) if e.window else None, e.mdl_observations,
                               e.refine, e.max_paths)

    def smsp_config(self) -> SmspConfig:
        s = self.smsp
        return SmspConfig(self.estimator_config(), s.tof_weight, s.grid_step_m, s.rotate, s.ground_truth)

    def env_state(self, **overrides) -> EnvState:
        e = self.economy
        kw = dict(maps=QosMappings.calibrated(e.quality_shape), v_c=e.v_c, v_m=e.v_m, E_t=e.E_t,
                  U_th=e.U_th, max_aps=e.max_aps, max_steps=e.max_steps)
        kw.update(overrides)
        return EnvState(**kw)

    def pricing_grid(self) -> PricingGrid:
        e = self.economy
        return PricingGrid(e.v_r_max, e.v_r_step, e.I_b_max, e.I_b_step)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.training
        return TrainConfig(T=t.T, batch_size=t.batch_size, tau=t.tau, discount=t.discount,
                           exploration_noise=t.exploration_noise, lr=t.lr, critic_lr=t.critic_lr,
                           epochs=t.epochs, critic_steps=t.critic_steps, hidden=t.hidden,
                           penalty=t.penalty, reward_scale=t.reward_scale,
                           plateau_window=t.plateau_window, seed=seed)

    def env_sampler(self) -> EnvSampler:
        t, e = self.training, self.economy
        return EnvSampler(v_c=t.v_c_range, v_m=t.v_m_range, U_th=t.U_th_range, E_t=(e.E_t, e.E_t),
                          max_aps=t.max_aps_range, max_steps=(e.max_steps, e.max_steps),
                          a_s_scale=t.a_s_scale_range)


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as TOML literals when possible."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ScenarioError([{"loc": "--set", "msg": f"expected key=value, got {item!r}"}])
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ScenarioError([{"loc": key, "msg": "cannot override inside a non-table value"}])
        node[parts[-1]] = _parse_value(value.strip())
    return data


def resolve_path(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    if name_or_path in BUNDLED:
        return Path(str(resources.files("wisense") / "scenarios" / f"{name_or_path}.toml"))
    raise ScenarioError([{"loc": "--scenario", "msg": f"no such file or bundled scenario: {name_or_path}"}])


def load_scenario(name_or_path: str, overrides=()) -> ScenarioFile:
    path = resolve_path(name_or_path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError([{"loc": str(path), "msg": str(exc)}]) from None
    return parse_scenario(apply_overrides(data, overrides))


def parse_scenario(data: dict) -> ScenarioFile:
    """Schema validation followed by a trial build of every module config."""
    try:
        sc = ScenarioFile.model_validate(data)
    except ValidationError as exc:
        raise ScenarioError([{"loc": ".".join(str(x) for x in e["loc"]), "msg": e["msg"]}
                             for e in exc.errors()]) from None
    checks = (("scene", sc.build_scene), ("estimation", sc.estimator_config),
              ("economy", sc.env_state), ("economy", sc.pricing_grid),
              ("training", lambda: sc.train_config(0)), ("training", sc.env_sampler))
    problems = []
    for loc, build in checks:
        try:
            build()
        except ValueError as exc:
            problems.append({"loc": loc, "msg": str(exc)})
    if problems:
        raise ScenarioError(problems)
    return sc
