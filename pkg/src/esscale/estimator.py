"""ES search-gradient estimator, fitness shaping and parameter updates.

All aggregation happens in one canonical order (ascending offset, then sign)
so that every process folding the same results gets bit-identical parameters.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from esscale import kernels
from esscale.noise import NoiseTable, PerturbationRef, materialize, mirror_ref, plan_refs, \
    episode_seed

SHAPINGS = ("centered_ranks", "raw")
OPTIMIZERS = ("sgd", "momentum", "adam")


class ProtocolError(ValueError):
    """Results that do not form valid mirrored pairs."""


class NumericError(ArithmeticError):
    """A non-finite return, gradient or parameter."""


@dataclass(frozen=True)
class EsConfig:
    sigma: float = 0.02
    alpha: float = 0.01
    pop_pairs: int = 50
    l2_coeff: float = 0.005
    shaping: str = "centered_ranks"
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.pop_pairs < 1:
            raise ValueError(f"pop_pairs must be >= 1, got {self.pop_pairs}")
        if self.l2_coeff < 0:
            raise ValueError(f"l2_coeff must be >= 0, got {self.l2_coeff}")
        if self.shaping not in SHAPINGS:
            raise ValueError(f"shaping must be one of {SHAPINGS}, got {self.shaping!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    version: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise NumericError("parameters must be finite")

    @property
    def d(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class GradientEstimate:
    values: np.ndarray
    n_used: int


@dataclass(frozen=True)
class OptimizerState:
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, d: int) -> "OptimizerState":
        return cls(0, np.zeros(d), np.zeros(d))


@dataclass(frozen=True)
class EvalResult:
    """Return of one perturbed evaluation, keyed by its perturbation."""

    ref: PerturbationRef
    value: float
    steps: int = 1
    truncated: bool = False


def theta_checksum(theta) -> int:
    """64-bit blake2b digest of the parameter bytes."""
    values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
    digest = hashlib.blake2b(np.ascontiguousarray(values, dtype=np.float64).tobytes(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little")


def centered_ranks(returns) -> np.ndarray:
    """Map returns to fractional ranks rescaled into [-0.5, 0.5].

    Ties share the average of their rank positions.  A single return maps to 0.
    """
    x = np.asarray(returns, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise ValueError("returns contain NaN")
    n = x.shape[0]
    if n == 1:
        return np.zeros(1)
    ranks = rankdata(x, method="average") - 1.0
    return ranks / (n - 1) - 0.5


def shape_returns(returns, cfg: EsConfig) -> np.ndarray:
    x = np.asarray(returns, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite return in generation")
    if cfg.shaping == "centered_ranks":
        return centered_ranks(x)
    return x.copy()


def noise_gradient(entries: Iterable[tuple[PerturbationRef, float]], sigma: float,
                   table: NoiseTable, d: int) -> GradientEstimate:
    """``1/(n sigma) * sum_i u_i eps_i`` over (ref, utility) entries.

    Entries sharing an offset are merged first (``sign * u`` summed with the
    negative mirror first), then offsets are accumulated in ascending order.
    """
    entries = sorted(entries, key=lambda e: (e[0].offset, _subset_key(e[0]), e[0].sign))
    n = len(entries)
    if n == 0:
        raise ValueError("no evaluations to combine")
    groups: dict[tuple, float] = {}
    order: list[tuple] = []
    for ref, u in entries:
        k = (ref.offset, ref.subset_seed, ref.density)
        if k not in groups:
            groups[k] = 0.0
            order.append(k)
        groups[k] = groups[k] + ref.sign * float(u)
    weights = np.array([groups[k] for k in order], dtype=np.float64)
    if all(k[1] is None for k in order):
        offsets = np.array([k[0] for k in order], dtype=np.int64)
        total = kernels.weighted_noise_sum(table.values, offsets, weights, d)
    else:
        total = np.zeros(d)
        for k, w in zip(order, weights.tolist()):
            total += w * materialize(table, PerturbationRef(k[0], 1, k[1], k[2]), d)
    g = total / (n * sigma)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient estimate")
    return GradientEstimate(g, n)


def _subset_key(ref: PerturbationRef) -> int:
    return -1 if ref.subset_seed is None else ref.subset_seed


def es_gradient(pairs: Sequence[tuple[PerturbationRef, float, PerturbationRef, float]],
                cfg: EsConfig, table: NoiseTable, d: int) -> GradientEstimate:
    """Antithetic estimate from ``(ref+, u+, ref-, u-)`` tuples of shaped returns."""
    if not pairs:
        raise ValueError("no pairs to combine")
    entries = []
    for pos, u_pos, neg, u_neg in pairs:
        if neg != mirror_ref(pos):
            raise ProtocolError(f"{neg} is not the mirror of {pos}")
        entries.append((pos, u_pos))
        entries.append((neg, u_neg))
    return noise_gradient(entries, cfg.sigma, table, d)


def apply_update(theta: ParamVector, g: GradientEstimate, cfg: EsConfig,
                 st: OptimizerState) -> tuple[ParamVector, OptimizerState]:
    """Decoupled weight decay followed by one ascent step."""
    grad = np.asarray(g.values, dtype=np.float64)
    if grad.shape != theta.values.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.values.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    t = st.step + 1
    m = st.m if st.m is not None else np.zeros_like(grad)
    v = st.v if st.v is not None else np.zeros_like(grad)
    if cfg.optimizer == "sgd":
        step = grad
    elif cfg.optimizer == "momentum":
        m = cfg.momentum * m + grad
        step = m
    else:
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (grad * grad)
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        step = m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
    new = (1.0 - cfg.alpha * cfg.l2_coeff) * theta.values + cfg.alpha * step
    if not np.all(np.isfinite(new)):
        raise NumericError(f"update produced non-finite parameters at version {theta.version}")
    return ParamVector(new, theta.version + 1), OptimizerState(t, m, v)


def canonical(results: Iterable[EvalResult]) -> list[EvalResult]:
    return sorted(results, key=lambda r: (r.ref.offset, _subset_key(r.ref), r.ref.sign))


def fold_results(theta: ParamVector, st: OptimizerState, cfg: EsConfig, table: NoiseTable,
                 results: Iterable[EvalResult]) -> tuple[ParamVector, OptimizerState,
                                                         GradientEstimate]:
    """Shape, combine and apply one generation of results.

    Shaping runs over the flat list of all returns; results are put in
    canonical order first, so their arrival order never matters.
    """
    ordered = canonical(results)
    keys = [r.ref for r in ordered]
    if len(set(keys)) != len(keys):
        raise ProtocolError("duplicate result in generation")
    present = set(keys)
    for ref in keys:
        if mirror_ref(ref) not in present:
            raise ProtocolError(f"missing mirror for {ref}")
    utilities = shape_returns([r.value for r in ordered], cfg)
    g = noise_gradient(zip(keys, utilities.tolist()), cfg.sigma, table, theta.d)
    new_theta, new_st = apply_update(theta, g, cfg, st)
    return new_theta, new_st, g


class EvaluationError(RuntimeError):
    def __init__(self, ref: PerturbationRef, cause: BaseException):
        super().__init__(f"evaluation failed for {ref}: {cause!r}")
        self.ref = ref


def _as_result(ref: PerturbationRef, out) -> EvalResult:
    if isinstance(out, EvalResult):
        return replace(out, ref=ref)
    if hasattr(out, "total_return"):
        return EvalResult(ref, float(out.total_return), int(out.steps), bool(out.truncated))
    return EvalResult(ref, float(out))


def evaluate_slots(theta: ParamVector, cfg: EsConfig, table: NoiseTable,
                   evaluator: Callable, run_seed: int, refs: Sequence[PerturbationRef],
                   slots: Sequence[int]) -> list[EvalResult]:
    """Evaluate both mirrors of each listed slot; ``evaluator(params, seed)``."""
    out = []
    for slot in slots:
        pos = refs[slot]
        seed = episode_seed(run_seed, theta.version, slot)
        for ref in (pos, mirror_ref(pos)):
            params = theta.values + cfg.sigma * materialize(table, ref, theta.d)
            try:
                res = evaluator(params, seed)
            except Exception as exc:
                raise EvaluationError(ref, exc) from exc
            out.append(_as_result(ref, res))
    return out


def generation(theta: ParamVector, st: OptimizerState, cfg: EsConfig, table: NoiseTable,
               evaluator: Callable, run_seed: int = 0):
    """One single-process ES generation with mirrored sampling.

    Returns ``(theta', state', stats)`` where ``stats`` holds the mean and max
    raw return, the evaluation count and the per-evaluation results.
    """
    refs = plan_refs(run_seed, theta.version, cfg.pop_pairs, table.length, theta.d)
    results = evaluate_slots(theta, cfg, table, evaluator, run_seed, refs, range(len(refs)))
    new_theta, new_st, g = fold_results(theta, st, cfg, table, results)
    raw = np.array([r.value for r in results])
    stats = {
        "mean_return": float(raw.mean()),
        "max_return": float(raw.max()),
        "n_evals": len(results),
        "timesteps": int(sum(r.steps for r in results)),
        "results": results,
        "gradient": g,
    }
    return new_theta, new_st, stats
