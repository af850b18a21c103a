"""Conditional diffusion generator for pricing strategies.

A small denoiser network runs a T-step reverse chain that maps Gaussian
noise to a normalized (v_r, I_b) pair, conditioned on the economy. Training
alternates a critic fit to observed user utility with actor steps that push
the chain output uphill on the critic. Everything is plain numpy with
hand-written backprop and Adam.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .incentive import EnvState, PricingGrid, PricingStrategy, QosMappings, evaluate_batch

ACTION_DIM = 2


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class BetaSchedule:
    """Variance schedule; ``betas[t-1]`` is beta_t for t = 1..T."""

    betas: tuple[float, ...]

    def __post_init__(self):
        b = np.asarray(self.betas, float)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("need at least one step")
        # beta = 0 is allowed so the noiseless limit can be exercised
        if np.any(b < 0) or np.any(b >= 1):
            raise ValueError("betas must lie in [0, 1)")
        object.__setattr__(self, "betas", tuple(float(x) for x in b))

    @classmethod
    def linear(cls, T: int = 10, beta_min: float = 1e-3, beta_max: float = 0.2) -> "BetaSchedule":
        if T < 1:
            raise ValueError("T must be >= 1")
        return cls(tuple(np.linspace(beta_min, beta_max, T)))

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        self._check(t)
        return self.betas[t - 1]

    def alpha(self, t: int) -> float:
        return 1.0 - self.beta(t)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to t; alpha_bar(0) = 1."""
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        # left-to-right product, so alpha_bar(t) == alpha_bar(t - 1) * (1 - beta_t) holds bit for bit
        return math.prod(1.0 - b for b in self.betas[:t])

    def _check(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")

    def to_dict(self) -> dict:
        return {"betas": list(self.betas)}


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def forward_sample(s0, t: int, schedule: BetaSchedule, seed=None, z=None):
    schedule._check(t)
    s0 = np.asarray(s0, float)
    if z is None:
        z = _rng(seed).standard_normal(s0.shape)
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * s0 + np.sqrt(1 - ab) * z


def posterior_params(s_t, eps, t: int, schedule: BetaSchedule):
    """(mean, variance) of s_{t-1} given s_t and the predicted noise."""
    if t == 0:
        raise ValueError("posterior undefined at t = 0")
    beta = schedule.beta(t)
    ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t - 1)
    s_t, eps = np.asarray(s_t, float), np.asarray(eps, float)
    if beta == 0:
        return s_t.copy(), 0.0
    mu = (s_t - beta * eps / np.sqrt(1 - ab)) / np.sqrt(1 - beta)
    return mu, (1 - ab_prev) * beta / (1 - ab)


# ---------------------------------------------------------------- networks


class MLP:
    """Two tanh hidden layers and a linear head."""

    def __init__(self, sizes, rng=None):
        rng = _rng(rng)
        self.sizes = tuple(int(s) for s in sizes)
        self.params = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = rng.standard_normal((n_in, n_out)) * np.sqrt(1.0 / n_in)
            self.params += [W, np.zeros(n_out)]
        # small head so a fresh denoiser predicts near-zero noise
        self.params[-2] *= 0.01

    def forward(self, x):
        cache = [x]
        h = x
        n = len(self.params) // 2
        for k in range(n):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            h = h @ W + b
            if k < n - 1:
                h = np.tanh(h)
            cache.append(h)
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Parameter gradients (same layout as params) and the input gradient."""
        n = len(self.params) // 2
        grads = [None] * len(self.params)
        g = grad_out
        for k in reversed(range(n)):
            h_in = cache[k]
            grads[2 * k] = h_in.T @ g
            grads[2 * k + 1] = g.sum(0)
            g = g @ self.params[2 * k].T
            if k > 0:
                g = g * (1 - cache[k] ** 2)
        return grads, g

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, float)
        k = 0
        for i, p in enumerate(self.params):
            self.params[i] = flat[k:k + p.size].reshape(p.shape).copy()
            k += p.size
        if k != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    def copy(self) -> "MLP":
        m = MLP.__new__(MLP)
        m.sizes = self.sizes
        m.params = [p.copy() for p in self.params]
        return m

    def soft_update(self, src: "MLP", tau: float):
        for i, p in enumerate(src.params):
            self.params[i] = (1 - tau) * self.params[i] + tau * p


class Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        for i, g in enumerate(grads):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.k)
            vh = self.v[i] / (1 - self.b2 ** self.k)
            params[i] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def time_embedding(t, dim: int = 16) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, float))
    half = dim // 2
    freqs = np.exp(-np.log(100.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ------------------------------------------------------ condition encoding

# reference values and scales used to normalize EnvState fields
_COND_REF = np.array([30.0, 45.0, 3500.0, 100.0, 4.5, 10.0, 1.0])
_COND_SCALE = np.array([5.0, 10.0, 500.0, 50.0, 2.0, 5.0, 0.2])
COND_DIM = _COND_REF.size


def encode_env(env: EnvState) -> np.ndarray:
    a_ref = QosMappings.calibrated().a_s
    raw = np.array([env.v_c, env.v_m, env.U_th, env.E_t, env.max_aps, env.max_steps,
                    env.maps.a_s / a_ref])
    return (raw - _COND_REF) / _COND_SCALE


def encode_envs(envs) -> np.ndarray:
    return np.array([encode_env(e) for e in envs])


@dataclass(frozen=True)
class PricingBox:
    v_r_max: float = 60.0
    I_b_max: float = 30.0

    @classmethod
    def from_grid(cls, grid: PricingGrid) -> "PricingBox":
        return cls(grid.v_r_max, grid.I_b_max)

    def normalize(self, v_r, I_b) -> np.ndarray:
        return np.stack([2 * np.asarray(v_r) / self.v_r_max - 1,
                         2 * np.asarray(I_b) / self.I_b_max - 1], axis=-1)

    def denormalize(self, s) -> tuple[np.ndarray, np.ndarray]:
        s = np.clip(np.asarray(s, float), -1.0, 1.0)
        return (s[..., 0] + 1) / 2 * self.v_r_max, (s[..., 1] + 1) / 2 * self.I_b_max


@dataclass
class DenoiserParams:
    net: MLP
    emb_dim: int = 16

    @classmethod
    def init(cls, hidden: int = 64, emb_dim: int = 16, seed=0) -> "DenoiserParams":
        return cls(MLP((ACTION_DIM + COND_DIM + emb_dim, hidden, hidden, ACTION_DIM), seed), emb_dim)

    @classmethod
    def zero(cls, hidden: int = 64, emb_dim: int = 16) -> "DenoiserParams":
        d = cls.init(hidden, emb_dim, 0)
        d.net.set_flat(np.zeros(d.net.get_flat().size))
        return d

    def inputs(self, s_t, t, cond):
        B = s_t.shape[0]
        emb = np.broadcast_to(time_embedding(t, self.emb_dim), (B, self.emb_dim))
        return np.concatenate([s_t, cond, emb], axis=1)

    def predict(self, s_t, t, cond):
        return self.net(self.inputs(s_t, t, cond))


@dataclass
class CriticParams:
    net: MLP

    @classmethod
    def init(cls, hidden: int = 64, seed=1) -> "CriticParams":
        return cls(MLP((ACTION_DIM + COND_DIM, hidden, hidden, 1), seed))

    def predict(self, s0, cond):
        return self.net(np.concatenate([s0, cond], axis=1))[:, 0]


# ----------------------------------------------------------- reverse chain


def reverse_step(s_t, t: int, cond, params: DenoiserParams, schedule: BetaSchedule, seed=None,
                 z=None, noise: bool = True):
    s_t = np.atleast_2d(np.asarray(s_t, float))
    cond = np.atleast_2d(cond)
    beta = schedule.beta(t)
    eps = params.predict(s_t, t, cond)
    mean, _ = posterior_params(s_t, eps, t, schedule)
    if t == 1 or not noise or beta == 0:
        return mean
    if z is None:
        z = _rng(seed).standard_normal(s_t.shape)
    return mean + np.sqrt(beta) * z


def draw_chain_noise(rng, B: int, T: int) -> np.ndarray:
    """(T + 1, B, 2) normals: index T seeds s_T, index t the step-t noise."""
    return rng.standard_normal((T + 1, B, ACTION_DIM))


def run_chain(cond, params: DenoiserParams, schedule: BetaSchedule, noise: np.ndarray,
              keep_cache: bool = False):
    """Deterministic reverse chain given all of its Gaussian draws."""
    T = schedule.T
    s = noise[T].copy()
    caches = []
    for t in range(T, 0, -1):
        x = params.inputs(s, t, cond)
        eps, cache = params.net.forward(x)
        beta, ab = schedule.beta(t), schedule.alpha_bar(t)
        if keep_cache:
            caches.append((t, cache))
        s = (s - beta * eps / np.sqrt(1 - ab)) / np.sqrt(1 - beta)
        if t > 1:
            s = s + np.sqrt(beta) * noise[t - 1]
    return (s, caches) if keep_cache else s


def generate_strategy(env: EnvState, params: DenoiserParams, schedule: BetaSchedule, seed=0,
                      box: PricingBox = PricingBox()) -> PricingStrategy:
    rng = _rng(seed)
    noise = draw_chain_noise(rng, 1, schedule.T)
    s0 = run_chain(encode_env(env)[None, :], params, schedule, noise)
    v_r, I_b = box.denormalize(s0[0])
    return PricingStrategy(float(v_r), float(I_b))


def generate_batch(envs, params: DenoiserParams, schedule: BetaSchedule, seed=0,
                   box: PricingBox = PricingBox()):
    """Normalized actions and de-normalized (v_r, I_b) arrays for a batch of envs."""
    rng = _rng(seed)
    noise = draw_chain_noise(rng, len(envs), schedule.T)
    s0 = run_chain(encode_envs(envs), params, schedule, noise)
    v_r, I_b = box.denormalize(s0)
    return s0, v_r, I_b


# ------------------------------------------------------------- objectives


def actor_loss_and_grad(params: DenoiserParams, critic: CriticParams, schedule: BetaSchedule,
                        cond, noise, box_weight: float = 10.0):
    """Loss = -mean Q(s0, c) + box penalty, with its gradient w.r.t. denoiser params.

    The gradient flows back through every step of the reverse chain.
    """
    s0, caches = run_chain(cond, params, schedule, noise, keep_cache=True)
    B = s0.shape[0]
    x_c = np.concatenate([s0, cond], axis=1)
    q, c_cache = critic.net.forward(x_c)
    over = np.maximum(np.abs(s0) - 1.0, 0.0)
    loss = -q.mean() + box_weight * np.sum(over ** 2) / B
    _, g_in = critic.net.backward(c_cache, -np.ones_like(q) / B)
    g = g_in[:, :ACTION_DIM] + box_weight * 2 * over * np.sign(s0) / B

    grads = [np.zeros_like(p) for p in params.net.params]
    for t, cache in caches[::-1]:
        beta, ab = schedule.beta(t), schedule.alpha_bar(t)
        inv = 1 / np.sqrt(1 - beta)
        g_eps = -g * inv * beta / np.sqrt(1 - ab)
        gp, g_x = params.net.backward(cache, g_eps)
        for i in range(len(grads)):
            grads[i] += gp[i]
        g = g * inv + g_x[:, :ACTION_DIM]
    return float(loss), grads


def critic_loss_and_grad(critic: CriticParams, s0, cond, target):
    x = np.concatenate([s0, cond], axis=1)
    q, cache = critic.net.forward(x)
    r = q[:, 0] - target
    grads, _ = critic.net.backward(cache, (2 * r / r.size)[:, None])
    return float(np.mean(r ** 2)), grads


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class EnvSampler:
    """Uniform ranges for the economy; mappings follow the calibrated curves scaled by a_s_scale."""

    v_c: tuple[float, float] = (27.0, 33.0)
    v_m: tuple[float, float] = (46.0, 54.0)
    U_th: tuple[float, float] = (3200.0, 3800.0)
    E_t: tuple[int, int] = (100, 100)
    max_aps: tuple[int, int] = (3, 6)
    max_steps: tuple[int, int] = (10, 10)
    a_s_scale: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        for name in ("v_c", "v_m", "U_th", "E_t", "max_aps", "max_steps", "a_s_scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: ({lo}, {hi})")

    def sample(self, rng, n: int) -> list[EnvState]:
        base = QosMappings.calibrated()
        out = []
        for _ in range(n):
            maps = replace(base, a_s=base.a_s * float(rng.uniform(*self.a_s_scale)))
            out.append(EnvState(maps=maps, v_c=float(rng.uniform(*self.v_c)),
                                v_m=float(rng.uniform(*self.v_m)),
                                E_t=int(rng.integers(self.E_t[0], self.E_t[1] + 1)),
                                U_th=float(rng.uniform(*self.U_th)),
                                max_aps=int(rng.integers(self.max_aps[0], self.max_aps[1] + 1)),
                                max_steps=int(rng.integers(self.max_steps[0], self.max_steps[1] + 1))))
        return out


@dataclass(frozen=True)
class TrainConfig:
    T: int = 10
    batch_size: int = 512
    tau: float = 0.005
    # single-step episodes: the discount never multiplies anything
    discount: float = 0.95
    exploration_noise: float = 0.01
    lr: float = 1e-5
    critic_lr: float | None = None
    epochs: int = 3000
    critic_steps: int = 2
    hidden: int = 64
    emb_dim: int = 16
    penalty: float = 500.0
    reward_scale: float = 1000.0
    plateau_window: int = 0
    seed: int = 0


def reward(u_us, u_vsp, U_th, penalty: float):
    """User utility when the provider accepts, a graded penalty otherwise."""
    u_us, u_vsp, U_th = (np.asarray(a, float) for a in (u_us, u_vsp, U_th))
    return np.where(u_vsp >= U_th, u_us, -(U_th - u_vsp) - penalty)


@dataclass
class TrainResult:
    denoiser: DenoiserParams
    critic: CriticParams
    schedule: BetaSchedule
    box: PricingBox
    config: TrainConfig
    reward_curve: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0


def train_policy(sampler: EnvSampler, schedule: BetaSchedule | None = None,
                 config: TrainConfig = TrainConfig(), box: PricingBox = PricingBox(),
                 log=None) -> TrainResult:
    """Actor-critic loop over fresh env batches.

    Random streams are spawned from ``config.seed``: one for environments,
    one for chain noise, one for exploration, one for network init.
    """
    schedule = schedule or BetaSchedule.linear(config.T)
    ss_env, ss_chain, ss_explore, ss_init = np.random.SeedSequence(config.seed).spawn(4)
    rng_env, rng_chain = np.random.default_rng(ss_env), np.random.default_rng(ss_chain)
    rng_explore = np.random.default_rng(ss_explore)
    init = np.random.default_rng(ss_init)
    actor = DenoiserParams.init(config.hidden, config.emb_dim, init)
    critic = CriticParams.init(config.hidden, init)
    target = DenoiserParams(actor.net.copy(), actor.emb_dim)
    opt_a = Adam(actor.net.params, config.lr)
    opt_c = Adam(critic.net.params, config.critic_lr or config.lr)
    curve = []
    t0 = time.perf_counter()
    best_ma, stall = -np.inf, 0
    for epoch in range(config.epochs):
        envs = sampler.sample(rng_env, config.batch_size)
        cond = encode_envs(envs)
        noise = draw_chain_noise(rng_chain, len(envs), schedule.T)
        s0 = run_chain(cond, actor, schedule, noise)
        a = np.clip(s0 + config.exploration_noise * rng_explore.standard_normal(s0.shape), -1, 1)
        v_r, I_b = box.denormalize(a)
        ev = evaluate_batch(v_r, I_b, envs)
        U_th = np.array([e.U_th for e in envs])
        r = reward(ev["u_us"], ev["u_vsp"], U_th, config.penalty)
        target_r = r / config.reward_scale
        for _ in range(config.critic_steps):
            c_loss, g = critic_loss_and_grad(critic, a, cond, target_r)
            opt_c.step(critic.net.params, g)
        a_loss, g = actor_loss_and_grad(actor, critic, schedule, cond, noise)
        if not (np.isfinite(c_loss) and np.isfinite(a_loss)
                and all(np.all(np.isfinite(x)) for x in g)):
            raise DivergenceError(f"non-finite loss at epoch {epoch}: critic={c_loss}, actor={a_loss}")
        opt_a.step(actor.net.params, g)
        target.net.soft_update(actor.net, config.tau)
        feasible = ev["u_vsp"] >= U_th
        row = {"epoch": epoch, "mean_reward": float(r.mean()), "feasible_fraction": float(feasible.mean()),
               "critic_loss": c_loss, "actor_loss": a_loss}
        curve.append(row)
        if log and epoch % 100 == 0:
            log(row)
        if config.plateau_window:
            w = config.plateau_window
            if len(curve) >= w:
                ma = np.mean([c["mean_reward"] for c in curve[-w:]])
                if ma > best_ma + 1e-3 * abs(best_ma if np.isfinite(best_ma) else 1):
                    best_ma, stall = ma, 0
                else:
                    stall += 1
                    if stall >= w:
                        break
    return TrainResult(target, critic, schedule, box, config, curve, time.perf_counter() - t0)


def evaluate_policy(result: TrainResult, envs, seed=0) -> dict:
    """Policy strategies, their best-response outcome and acceptance per env."""
    _, v_r, I_b = generate_batch(envs, result.denoiser, result.schedule, seed, result.box)
    ev = evaluate_batch(v_r, I_b, envs)
    U_th = np.array([e.U_th for e in envs])
    return {"v_r": v_r, "I_b": I_b, "accepted": ev["u_vsp"] >= U_th, **ev}


# ------------------------------------------------------------ persistence


def save_checkpoint(result: TrainResult, stem) -> None:
    """``stem.json`` holds metadata, ``stem.npz`` the flat parameter vectors."""
    stem = Path(stem)
    meta = {"schedule": result.schedule.to_dict(), "box": asdict(result.box),
            "config": asdict(result.config), "denoiser_sizes": list(result.denoiser.net.sizes),
            "critic_sizes": list(result.critic.net.sizes), "emb_dim": result.denoiser.emb_dim,
            "cond_ref": _COND_REF.tolist(), "cond_scale": _COND_SCALE.tolist()}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    np.savez(stem.with_suffix(".npz"), denoiser=result.denoiser.net.get_flat(),
             critic=result.critic.net.get_flat())


def load_checkpoint(stem) -> TrainResult:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    blobs = np.load(stem.with_suffix(".npz"))
    den = MLP(meta["denoiser_sizes"], 0)
    den.set_flat(blobs["denoiser"])
    cri = MLP(meta["critic_sizes"], 0)
    cri.set_flat(blobs["critic"])
    return TrainResult(DenoiserParams(den, meta["emb_dim"]), CriticParams(cri),
                       BetaSchedule(tuple(meta["schedule"]["betas"])), PricingBox(**meta["box"]),
                       TrainConfig(**meta["config"]))


def write_reward_curve(curve, path) -> None:
    cols = ["epoch", "mean_reward", "feasible_fraction", "critic_loss", "actor_loss"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in cols})
