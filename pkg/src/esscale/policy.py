"""Deterministic MLP policies over a flat parameter vector.

Layout of the flat vector: when virtual batch norm is on, ``obs_dim`` scale
entries then ``obs_dim`` shift entries; then for every layer its weight
matrix (``fan_in x fan_out``, row-major) followed by its bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from esscale.noise import derive_key

VBN_EPS = 1e-5


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceBatch:
    """Fixed normalization statistics collected once at the start of training."""

    observations: np.ndarray = field(repr=False)
    mean: np.ndarray
    var: np.ndarray
    eps: float = VBN_EPS

    @classmethod
    def from_observations(cls, observations, eps: float = VBN_EPS) -> "ReferenceBatch":
        obs = np.array(observations, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[0] < 1:
            raise PolicyError("reference batch must be a non-empty matrix")
        mean = obs.mean(axis=0)
        var = obs.var(axis=0)
        for arr in (obs, mean, var):
            arr.setflags(write=False)
        return cls(obs, mean, var, eps)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var + self.eps)


@dataclass(frozen=True)
class PolicySpec:
    obs_dim: int
    action_dim: int = 1
    hidden: tuple = (64, 64)
    action_mode: str = "continuous"
    bins: int = 10
    low: float = -1.0
    high: float = 1.0
    vbn: Optional[ReferenceBatch] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.obs_dim < 1 or self.action_dim < 1 or any(h < 1 for h in self.hidden):
            raise PolicyError("layer widths must be >= 1")
        if self.action_mode not in ("continuous", "discretized"):
            raise PolicyError(f"unknown action mode {self.action_mode!r}")
        if self.action_mode == "discretized" and self.bins < 2:
            raise PolicyError("bins must be >= 2")
        if not self.low < self.high:
            raise PolicyError("low must be < high")
        if self.vbn is not None and self.vbn.mean.shape != (self.obs_dim,):
            raise PolicyError("reference statistics do not match obs_dim")

    @property
    def n_out(self) -> int:
        return self.action_dim * (self.bins if self.action_mode == "discretized" else 1)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.obs_dim, *self.hidden, self.n_out]

    def with_reference(self, ref: Optional[ReferenceBatch]) -> "PolicySpec":
        return PolicySpec(self.obs_dim, self.action_dim, self.hidden, self.action_mode,
                          self.bins, self.low, self.high, ref)


def param_count(spec: PolicySpec) -> int:
    sizes = spec.layer_sizes
    n = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if spec.vbn is not None:
        n += 2 * spec.obs_dim
    return n


def discretize_bounds(action_dim: int, bins: int, low, high) -> np.ndarray:
    """Bin centres, shape ``(action_dim, bins)``, of equal-width bins over [low, high]."""
    if bins < 2:
        raise PolicyError("bins must be >= 2")
    low = np.broadcast_to(np.asarray(low, dtype=np.float64), (action_dim,))
    high = np.broadcast_to(np.asarray(high, dtype=np.float64), (action_dim,))
    if np.any(low >= high):
        raise PolicyError("low must be < high")
    k = np.arange(bins, dtype=np.float64) + 0.5
    return low[:, None] + k[None, :] * (high - low)[:, None] / bins


def unflatten(spec: PolicySpec, theta) -> dict:
    """Split a flat vector into named views (no copies)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (param_count(spec),):
        raise PolicyError(f"expected {param_count(spec)} parameters, got {theta.shape}")
    pos = 0
    out = {"layers": []}
    if spec.vbn is not None:
        out["gamma"] = theta[:spec.obs_dim]
        out["beta"] = theta[spec.obs_dim:2 * spec.obs_dim]
        pos = 2 * spec.obs_dim
    sizes = spec.layer_sizes
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = theta[pos:pos + a * b].reshape(a, b)
        pos += a * b
        out["layers"].append((w, theta[pos:pos + b]))
        pos += b
    return out


def flatten(spec: PolicySpec, parts: dict) -> np.ndarray:
    chunks = []
    if spec.vbn is not None:
        chunks += [parts["gamma"], parts["beta"]]
    for w, b in parts["layers"]:
        chunks += [np.ravel(w), b]
    return np.concatenate([np.asarray(c, dtype=np.float64) for c in chunks])


def init_params(spec: PolicySpec, seed: int) -> np.ndarray:
    """Weights uniform in +-1/sqrt(fan_in), zero biases, VBN scale 1 and shift 0."""
    rng = np.random.default_rng(seed)
    parts = {"layers": []}
    if spec.vbn is not None:
        parts["gamma"] = np.ones(spec.obs_dim)
        parts["beta"] = np.zeros(spec.obs_dim)
    sizes = spec.layer_sizes
    for a, b in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(a)
        parts["layers"].append((rng.uniform(-bound, bound, size=(a, b)), np.zeros(b)))
    return flatten(spec, parts)


def normalize(spec: PolicySpec, parts: dict, obs: np.ndarray) -> np.ndarray:
    ref = spec.vbn
    return (obs - ref.mean) / ref.std * parts["gamma"] + parts["beta"]


def forward(spec: PolicySpec, theta, obs) -> np.ndarray:
    """Deterministic action for one observation."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (spec.obs_dim,):
        raise PolicyError(f"observation shape {obs.shape} != ({spec.obs_dim},)")
    if not np.all(np.isfinite(obs)):
        raise PolicyError("observation is not finite")
    theta = theta.values if hasattr(theta, "values") else theta
    parts = unflatten(spec, theta)
    x = normalize(spec, parts, obs) if spec.vbn is not None else obs
    layers = parts["layers"]
    for i, (w, b) in enumerate(layers):
        x = x @ w + b
        if i < len(layers) - 1:
            x = np.tanh(x)
    if spec.action_mode == "continuous":
        return np.clip(x, spec.low, spec.high)
    scores = x.reshape(spec.action_dim, spec.bins)
    centers = discretize_bounds(spec.action_dim, spec.bins, spec.low, spec.high)
    idx = np.argmax(scores, axis=1)
    return centers[np.arange(spec.action_dim), idx]


def build_reference(spec: PolicySpec, env, seed: int, batch_size: int = 128,
                    eps: float = VBN_EPS) -> ReferenceBatch:
    """Collect observations from a uniformly random policy in ``env``.

    ``env`` needs ``reset(seed) -> obs`` and ``step(action) -> (obs, reward, done)``.
    """
    rng = np.random.default_rng(seed)
    obs_list: list[np.ndarray] = []
    episode = 0
    obs = env.reset(seed=_episode_seed(seed, episode))
    while len(obs_list) < batch_size:
        obs_list.append(np.asarray(obs, dtype=np.float64))
        action = rng.uniform(spec.low, spec.high, size=spec.action_dim)
        obs, _, done = env.step(action)
        if done:
            episode += 1
            obs = env.reset(seed=_episode_seed(seed, episode))
    return ReferenceBatch.from_observations(np.stack(obs_list), eps)


def _episode_seed(seed: int, episode: int) -> int:
    return derive_key(seed, episode, 7)


def forward_batch(spec: PolicySpec, theta, obs_batch: Sequence) -> np.ndarray:
    return np.stack([forward(spec, theta, o) for o in obs_batch])
