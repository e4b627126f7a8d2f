"""Desk-scale evaluation suite.

Black-box test functions, a cart-pole balance task, a delayed-reward binary
chain, a frame-skip wrapper and the dynamic episode cap.  Every environment
is a deterministic function of its seed and action sequence, and returns are
never discounted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from esscale import kernels
from esscale.policy import PolicySpec, discretize_bounds

INV_2_53 = 1.0 / 9007199254740992.0


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class RolloutResult:
    total_return: float
    steps: int
    truncated: bool = False


# --- black-box functions -------------------------------------------------

def sphere(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.dot(x, x))


def rosenbrock(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


def rastrigin(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(10.0 * x.size + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x)))


BLACKBOX = {"sphere": sphere, "rosenbrock": rosenbrock, "rastrigin": rastrigin}


def blackbox_eval(fn: str, x) -> float:
    """Negated test-function value, so that maximizing it minimizes the function."""
    try:
        f = BLACKBOX[fn]
    except KeyError:
        raise EnvError(f"unknown black-box function {fn!r}") from None
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise EnvError("input is not finite")
    return -f(x)


def blackbox_start(fn: str, d: int) -> np.ndarray:
    """Conventional starting points: -1.2/1 alternating for Rosenbrock, ones otherwise."""
    if fn == "rosenbrock":
        x = np.ones(d)
        x[0::2] = -1.2
        return x
    return np.ones(d) / math.sqrt(d) if fn == "sphere" else np.ones(d)


# --- cart-pole -------------------------------------------------------------

@dataclass(frozen=True)
class PoleConfig:
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5  # half the pole length
    force_mag: float = 10.0
    dt: float = 0.02
    x_limit: float = 2.4
    theta_limit: float = 0.21
    horizon: int = 1000
    init_range: float = 0.05

    @property
    def consts(self) -> tuple:
        return (self.gravity, self.masscart, self.masspole, self.length, self.force_mag,
                self.dt, self.x_limit, self.theta_limit)


def pole_step(state, action, dt: float = 0.02, cfg: PoleConfig = PoleConfig()):
    """Advance (x, x_dot, theta, theta_dot) by one step under horizontal ``action``.

    Reward is 1 when the new state is inside the angle and position limits;
    otherwise 0 and the episode is done.
    """
    state = tuple(float(s) for s in state)
    if not all(math.isfinite(s) for s in state):
        raise ArithmeticError("non-finite cart-pole state")
    force = min(max(float(np.ravel(action)[0]), -cfg.force_mag), cfg.force_mag)
    new = kernels.pole_step(state, force, cfg.gravity, cfg.masscart, cfg.masspole,
                            cfg.length, dt)
    ok = abs(new[2]) < cfg.theta_limit and abs(new[0]) < cfg.x_limit
    return new, (1.0 if ok else 0.0), not ok


def pole_initial_state(seed: int, cfg: PoleConfig = PoleConfig()) -> tuple:
    raw = kernels.splitmix64_at(seed, np.arange(4, dtype=np.uint64))
    u = (raw >> np.uint64(11)).astype(np.float64) * INV_2_53
    return tuple((-cfg.init_range + 2.0 * cfg.init_range * u).tolist())


class PoleBalance:
    """Cart-pole episode with a hard horizon (1000 steps by default)."""

    obs_dim = 4
    action_dim = 1

    def __init__(self, cfg: PoleConfig = PoleConfig()):
        self.cfg = cfg
        self.horizon = cfg.horizon
        self.state = None
        self.t = 0

    def reset(self, seed: int = 0):
        self.state = pole_initial_state(seed, self.cfg)
        self.t = 0
        return np.array(self.state)

    def step(self, action):
        self.state, reward, done = pole_step(self.state, action, self.cfg.dt, self.cfg)
        self.t += 1
        return np.array(self.state), reward, done or self.t >= self.horizon


class FrameSkip:
    """Repeat each decision ``k`` simulator steps, summing rewards."""

    def __init__(self, env, k: int):
        if k < 1:
            raise EnvError(f"frame skip must be >= 1, got {k}")
        self.env = env
        self.k = k
        self.obs_dim = env.obs_dim
        self.action_dim = env.action_dim
        self.horizon = env.horizon
        self.substeps = 0

    def reset(self, seed: int = 0):
        self.substeps = 0
        return self.env.reset(seed)

    def step(self, action, limit: Optional[int] = None):
        total = 0.0
        done = False
        obs = None
        for _ in range(self.k):
            obs, r, done = self.env.step(action)
            total += r
            self.substeps += 1
            if done or (limit is not None and self.substeps >= limit):
                break
        return obs, total, done


def frameskip_wrap(env, k: int) -> FrameSkip:
    return FrameSkip(env, k)


def rollout(env, act: Callable, seed: int, cap: Optional[int] = None) -> RolloutResult:
    """Run one episode with ``act(obs) -> action``, counting simulator steps.

    The episode stops at ``cap`` simulator steps (flagged as truncated) when
    the cap binds before the environment's own horizon.
    """
    obs = env.reset(seed)
    total = 0.0
    horizon = env.horizon
    limit = horizon if cap is None or cap <= 0 else min(horizon, cap)
    skip = isinstance(env, FrameSkip)
    steps = 0
    done = False
    while not done and steps < limit:
        if skip:
            obs, r, done = env.step(act(obs), limit)
            steps = env.substeps
        else:
            obs, r, done = env.step(act(obs))
            steps += 1
        total += r
    # hitting the horizon or failing sets done; only a binding cap truncates
    return RolloutResult(total, steps, (not done) and steps >= limit)


def pole_rollout(spec: PolicySpec, theta, seed: int, cap: Optional[int] = None,
                 frameskip: int = 1, cfg: PoleConfig = PoleConfig(),
                 impl=None) -> RolloutResult:
    """Cart-pole episode for an MLP policy through the selected kernel backend."""
    if frameskip < 1:
        raise EnvError(f"frame skip must be >= 1, got {frameskip}")
    if spec.obs_dim != 4 or spec.action_dim != 1:
        raise EnvError("cart-pole needs obs_dim=4 and action_dim=1")
    impl = impl or kernels
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    centers = None
    if spec.action_mode == "discretized":
        centers = discretize_bounds(1, spec.bins, spec.low, spec.high)[0]
    mean = std = None
    if spec.vbn is not None:
        mean, std = spec.vbn.mean, spec.vbn.std
    total, steps, truncated = impl.pole_rollout(
        theta, np.array(spec.layer_sizes, dtype=np.int64), mean, std, centers,
        float(spec.low), float(spec.high), pole_initial_state(seed, cfg), cfg.consts,
        int(cfg.horizon), int(cap or 0), int(frameskip))
    return RolloutResult(float(total), int(steps), bool(truncated))


# --- delayed-reward chain --------------------------------------------------

def chain_observations(seed: int, T: int) -> np.ndarray:
    """The +-1 observation sequence of a chain episode (top bit of the stream)."""
    raw = kernels.splitmix64_at(seed, np.arange(T, dtype=np.uint64))
    return np.where((raw >> np.uint64(63)) == 1, 1.0, -1.0)


def chain_return(n_correct, T: int, first_correct=1):
    """Terminal reward: 1 for a majority of correct actions, else 0.

    An exact tie (even ``T``) is settled by whether the first action was
    correct, so the return is always 0 or 1.  The majority vote keeps the
    return variance under random behaviour at 1/4 for every ``T`` while each
    single action is only weakly correlated with it.
    """
    n_correct = np.asarray(n_correct)
    return np.where(2 * n_correct > T, 1.0,
                    np.where(2 * n_correct == T, np.asarray(first_correct, dtype=np.float64), 0.0))


def chain_policy_actions(theta, obs) -> np.ndarray:
    """Deterministic scalar policy: act 1 iff ``theta0 * obs + theta1 > 0``."""
    theta = np.asarray(theta, dtype=np.float64)
    return (theta[0] * obs + theta[1] > 0).astype(np.int64)


def chain_eval(theta, T: int, seed: int) -> RolloutResult:
    """Run the T-step chain; the correct action at each step is ``obs > 0``."""
    if T < 1:
        raise EnvError("horizon must be >= 1")
    obs = chain_observations(seed, T)
    hits = chain_policy_actions(theta, obs) == (obs > 0)
    return RolloutResult(float(chain_return(int(hits.sum()), T, int(hits[0]))), T, False)


class ChainEnv:
    """Step-wise view of the chain; reward arrives only on the last step."""

    obs_dim = 1
    action_dim = 1

    def __init__(self, T: int):
        if T < 1:
            raise EnvError("horizon must be >= 1")
        self.T = T
        self.horizon = T

    def reset(self, seed: int = 0):
        self.obs = chain_observations(seed, self.T)
        self.t = 0
        self.correct = 0
        self.first = 0
        return np.array([self.obs[0]])

    def step(self, action):
        a = int(np.ravel(action)[0] > 0)
        hit = int(a == (self.obs[self.t] > 0))
        if self.t == 0:
            self.first = hit
        self.correct += hit
        self.t += 1
        done = self.t >= self.T
        reward = float(chain_return(self.correct, self.T, self.first)) if done else 0.0
        nxt = self.obs[self.t] if not done else 0.0
        return np.array([nxt]), reward, done


# --- episode cap -------------------------------------------------------------

CAP_EMA = 0.1


@dataclass(frozen=True)
class EpisodeCap:
    m: int
    mean_steps: float
    factor: float = 2.0
    floor: int = 1

    @classmethod
    def start(cls, mean_steps: float, factor: float = 2.0, floor: int = 1) -> "EpisodeCap":
        return cls(_cap_value(mean_steps, factor, floor), float(mean_steps), factor, floor)


def _cap_value(mean_steps: float, factor: float, floor: int) -> int:
    return max(int(floor), int(math.floor(factor * mean_steps + 0.5)), 1)


def update_cap(cap: EpisodeCap, observed_steps: int) -> EpisodeCap:
    """Fold one episode length into the running mean and recompute the cap."""
    if observed_steps < 1:
        raise EnvError("observed_steps must be >= 1")
    mean = (1.0 - CAP_EMA) * cap.mean_steps + CAP_EMA * observed_steps
    return replace(cap, mean_steps=mean, m=_cap_value(mean, cap.factor, cap.floor))
