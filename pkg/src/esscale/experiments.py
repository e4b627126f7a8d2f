"""Desk-scale analyses: estimator variance against horizon, duplicated features,
frame-skip invariance and worker scaling.

Every function is deterministic given its seeds and can write a CSV whose
header row is listed in :data:`CSV_HEADERS`.
"""
from __future__ import annotations

import csv
import itertools
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, log_expit
from scipy.stats import norm

from esscale import config as config_mod
from esscale import envs, kernels, training
from esscale.estimator import (EsConfig, GradientEstimate, ParamVector, noise_gradient,
                               evaluate_slots, shape_returns)
from esscale.noise import NoiseTable, build_table, derive_key, materialize, plan_refs

log = logging.getLogger(__name__)

CSV_HEADERS = {
    "variance": ("T", "kind", "var_mean", "n"),
    "dupfeat": ("step", "pred_divergence", "pred_divergence_halving"),
    "frameskip": ("skip", "seed", "updates_to_threshold", "reached"),
    "scaling": ("workers", "gen_ms", "efficiency"),
}


def write_csv(path, kind: str, rows: Sequence[Sequence]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADERS[kind])
        w.writerows(rows)
    return path


def _uniform(key: int, n: int) -> np.ndarray:
    raw = kernels.splitmix64_at(key, np.arange(n, dtype=np.uint64))
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


# --- stochastic chain policy and REINFORCE --------------------------------------

def chain_batch_observations(seed: int, n: int, T: int) -> np.ndarray:
    """``(n, T)`` array of +-1 chain observations from one counter stream."""
    raw = kernels.splitmix64_at(derive_key(seed, 0), np.arange(n * T, dtype=np.uint64))
    return np.where((raw >> np.uint64(63)) == 1, 1.0, -1.0).reshape(n, T)


def action_probs(theta, obs, tau: float) -> np.ndarray:
    """P(action = 1 | obs) for the two-action softmax counterpart of the chain policy."""
    theta = np.asarray(theta, dtype=np.float64)
    return expit((theta[0] * obs + theta[1]) / tau)


def _pg_terms(theta, T: int, n: int, seed: int, tau: float):
    """Per-episode returns ``(n,)`` and summed score functions ``(n, 2)``."""
    obs = chain_batch_observations(seed, n, T)
    p = action_probs(theta, obs, tau)
    a = (_uniform(derive_key(seed, 1), n * T).reshape(n, T) < p).astype(np.float64)
    hits = a == (obs > 0)
    R = envs.chain_return(hits.sum(axis=1), T, hits[:, 0].astype(np.float64))
    resid = a - p
    score = np.stack([(resid * obs).sum(axis=1), resid.sum(axis=1)], axis=1) / tau
    return R, score


def pg_estimates(theta, T: int, n_estimates: int, episodes: int, seed: int, tau: float = 1.0,
                 baseline: str = "mean_return") -> np.ndarray:
    """``n_estimates`` independent REINFORCE estimates, each from ``episodes`` episodes.

    The mean-return baseline is leave-one-out (the mean of the *other* episodes
    in the same estimate), which keeps each estimate unbiased.
    """
    if baseline not in ("none", "mean_return"):
        raise ValueError(f"unknown baseline {baseline!r}")
    if baseline == "mean_return" and episodes < 2:
        raise ValueError("a mean-return baseline needs at least 2 episodes")
    R, score = _pg_terms(theta, T, n_estimates * episodes, seed, tau)
    R = R.reshape(n_estimates, episodes)
    score = score.reshape(n_estimates, episodes, 2)
    if baseline == "mean_return":
        b = (R.sum(axis=1, keepdims=True) - R) / (episodes - 1)
        R = R - b
    return (R[..., None] * score).mean(axis=1)


def pg_gradient_reinforce(theta, T: int, n_episodes: int, seed: int = 0, tau: float = 1.0,
                          baseline: str = "mean_return") -> GradientEstimate:
    """Monte Carlo REINFORCE gradient of the expected chain return.

    Args:
        theta: the two policy parameters (observation weight, bias).
        T: chain horizon.
        n_episodes: episodes averaged into the estimate.
        seed: seeds the observation and action streams.
        tau: softmax temperature.
        baseline: ``"none"`` or ``"mean_return"``.
    """
    g = pg_estimates(theta, T, 1, n_episodes, seed, tau, baseline)[0]
    return GradientEstimate(g, n_episodes)


def expected_return_exact(theta, T: int, tau: float) -> float:
    """E[R] of the stochastic chain policy by enumerating observations and actions.

    Observations are treated as fair coin flips; feasible for ``T <= 8``.
    """
    if T > 8:
        raise ValueError("enumeration is exponential in T; use T <= 8")
    total = 0.0
    for obs in itertools.product((-1.0, 1.0), repeat=T):
        o = np.array(obs)
        p = action_probs(theta, o, tau)
        for acts in itertools.product((0, 1), repeat=T):
            a = np.array(acts)
            prob = float(np.prod(np.where(a == 1, p, 1.0 - p)))
            hits = a == (o > 0)
            total += prob * float(envs.chain_return(hits.sum(), T, float(hits[0])))
    return total / 2 ** T


def finite_difference_gradient(theta, T: int, tau: float, h: float = 1e-3) -> np.ndarray:
    """Central differences of :func:`expected_return_exact`."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (expected_return_exact(theta + e, T, tau)
                - expected_return_exact(theta - e, T, tau)) / (2 * h)
    return g


# --- ES on the chain -------------------------------------------------------------

def es_estimates(theta, T: int, n_estimates: int, n_pairs: int, sigma: float, seed: int,
                 table: NoiseTable) -> np.ndarray:
    """``n_estimates`` antithetic ES estimates on the chain, raw (unshaped) returns."""
    cfg = EsConfig(sigma=sigma, pop_pairs=n_pairs, shaping="raw", optimizer="sgd")
    out = np.empty((n_estimates, 2))
    for k in range(n_estimates):
        pv = ParamVector(np.asarray(theta, dtype=np.float64), k)
        refs = plan_refs(seed, k, n_pairs, table.length, 2)
        results = evaluate_slots(pv, cfg, table, lambda p, s: envs.chain_eval(p, T, s), seed,
                                 refs, range(n_pairs))
        g = noise_gradient([(r.ref, r.value) for r in results], sigma, table, 2)
        out[k] = g.values
    return out


# --- matched exploration -----------------------------------------------------------

CALIBRATION_THETA = (1.0, 0.0)


def es_return_variance(sigma: float) -> float:
    """Var[R] of the perturbed deterministic policy at ``CALIBRATION_THETA``, T=1.

    The action is wrong iff ``1 + sigma (eps0 + o eps1) < 0``, a Gaussian tail.
    """
    q = norm.cdf(-1.0 / (sigma * np.sqrt(2.0)))
    return float(q * (1.0 - q))


def pg_return_variance(tau: float) -> float:
    """Var[R] of the softmax policy at ``CALIBRATION_THETA``, T=1."""
    q = float(expit(-1.0 / tau))
    return q * (1.0 - q)


def calibrate_tau(sigma: float, rtol: float = 0.05) -> float:
    """Temperature whose return variance matches ES noise ``sigma`` (root bracketing).

    Both variances are exact and increase monotonically towards 1/4, so the
    root is unique; ``rtol`` is checked on the matched variances.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    target = es_return_variance(sigma)
    if not 0.0 < target < 0.25:
        raise ValueError(f"sigma={sigma} gives a degenerate return variance {target}")
    lo, hi = 1e-3, 1e3

    def f(log_tau):
        # log-variance, so tiny tail probabilities are matched accurately
        z = 1.0 / np.exp(log_tau)
        return float(log_expit(-z) + log_expit(z)) - np.log(target)

    tau = float(np.exp(brentq(f, np.log(lo), np.log(hi), xtol=1e-12)))
    got = pg_return_variance(tau)
    if abs(got - target) > rtol * target:
        raise ArithmeticError("temperature calibration did not converge")
    return tau


@dataclass(frozen=True)
class VarianceReport:
    T: int
    kind: str
    variance: np.ndarray
    n: int

    @property
    def var_mean(self) -> float:
        return float(np.mean(self.variance))


def variance_sweep(T_list=(1, 10, 100, 1000), n_samples: int = 500, episodes: int = 10,
                   sigma: float = 0.1, seed: int = 0, theta=(0.0, 0.0),
                   table: Optional[NoiseTable] = None, out: Optional[str] = None
                   ) -> list[VarianceReport]:
    """Per-coordinate variance of ES and PG estimates as a function of the horizon.

    Args:
        T_list: horizons to sweep.
        n_samples: independent estimates per (T, kind); at least 100.
        episodes: episodes per estimate (ES uses ``episodes // 2`` mirrored pairs).
        sigma: ES noise scale; the PG temperature is matched via :func:`calibrate_tau`.
        theta: reference parameters at which both estimators are evaluated.
        out: optional CSV path.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    if episodes < 2 or episodes % 2:
        raise ValueError("episodes must be an even number >= 2")
    table = table or build_table(derive_key(seed, 99) & 0xFFFF, 1 << 16)
    tau = calibrate_tau(sigma)
    reports = []
    for T in T_list:
        es = es_estimates(theta, T, n_samples, episodes // 2, sigma, seed, table)
        pg = pg_estimates(theta, T, n_samples, episodes, derive_key(seed, T), tau)
        reports.append(VarianceReport(T, "es", es.var(axis=0, ddof=1), n_samples))
        reports.append(VarianceReport(T, "pg", pg.var(axis=0, ddof=1), n_samples))
        log.info("T=%d es=%.4g pg=%.4g (tau=%.4g)", T, reports[-2].var_mean,
                 reports[-1].var_mean, tau)
    if out:
        write_csv(out, "variance", [(r.T, r.kind, repr(r.var_mean), r.n) for r in reports])
    return reports


# --- duplicated features ------------------------------------------------------------

def regression_problem(base_dim: int, n_rows: int = 64, seed: int = 0):
    """Fixed synthetic data ``(X, y, probe)`` for a linear least-squares objective."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_rows, base_dim))
    w_true = rng.standard_normal(base_dim)
    y = X @ w_true + 0.1 * rng.standard_normal(n_rows)
    probe = rng.standard_normal((16, base_dim))
    return X, y, probe


def regression_fitness(X, y):
    def F(w):
        r = y - X @ w
        return -float(np.mean(r * r))
    return F


def _es_step(F, w, sigma: float, alpha: float, eps: np.ndarray, shaping: str) -> np.ndarray:
    """Plain antithetic ES ascent step with explicit noise rows ``eps``."""
    pos = [F(w + sigma * e) for e in eps]
    neg = [F(w - sigma * e) for e in eps]
    u = shape_returns(np.array(pos + neg), EsConfig(shaping=shaping, sigma=sigma))
    n = len(eps)
    g = ((u[:n] - u[n:])[:, None] * eps).sum(axis=0) / (2 * n * sigma)
    return w + alpha * g


@dataclass
class DupReport:
    rows: list = field(default_factory=list)
    sigma: float = 0.0
    alpha: float = 0.0

    @property
    def max_divergence(self) -> float:
        return max(r[1] for r in self.rows)

    @property
    def max_divergence_halving(self) -> float:
        return max(r[2] for r in self.rows)


def dup_feature_check(base_dim: int = 5, n_steps: int = 200, seed: int = 0, sigma: float = 0.1,
                      alpha: float = 0.05, n_pairs: int = 20, shaping: str = "centered_ranks",
                      table: Optional[NoiseTable] = None, out: Optional[str] = None) -> DupReport:
    """Compare ES on ``x`` against ES on ``(x, x)`` under two noise/step scalings.

    The duplicated run uses coupled noise ``eps1 = (eta + zeta)/sqrt2``,
    ``eps2 = (eta - zeta)/sqrt2`` where ``eta`` is the base run's noise, so
    with ``sigma/sqrt2`` and ``alpha/2`` the effective weight ``s = w1 + w2``
    sees exactly the base perturbations and updates.  The halving rule
    (``sigma/2``, ``alpha/2``) is run on the same noise for comparison.
    """
    X, y, probe = regression_problem(base_dim, seed=seed)
    F = regression_fitness(X, y)
    F_dup = lambda w: F(w[:base_dim] + w[base_dim:])  # noqa: E731
    table = table or build_table(derive_key(seed, 98) & 0xFFFF, 1 << 16)
    w0 = np.zeros(base_dim)
    w = w0.copy()
    dup = np.concatenate([w0 / 2, w0 / 2])
    half = dup.copy()
    zeta_seed = derive_key(seed, 1)
    report = DupReport(sigma=sigma, alpha=alpha)

    def div(a):
        return float(np.max(np.abs(probe @ w - probe @ (a[:base_dim] + a[base_dim:]))))

    report.rows.append((0, div(dup), div(half)))
    for t in range(n_steps):
        eta = np.array([materialize(table, r, base_dim)
                        for r in plan_refs(seed, t, n_pairs, table.length, base_dim)])
        zeta = np.array([materialize(table, r, base_dim)
                         for r in plan_refs(zeta_seed, t, n_pairs, table.length, base_dim)])
        coupled = np.concatenate([(eta + zeta) / np.sqrt(2.0), (eta - zeta) / np.sqrt(2.0)], 1)
        w = _es_step(F, w, sigma, alpha, eta, shaping)
        dup = _es_step(F_dup, dup, sigma / np.sqrt(2.0), alpha / 2, coupled, shaping)
        half = _es_step(F_dup, half, sigma / 2, alpha / 2, coupled, shaping)
        report.rows.append((t + 1, div(dup), div(half)))
    if out:
        write_csv(out, "dupfeat", [(s, repr(a), repr(b)) for s, a, b in report.rows])
    return report


def dup_update_samples(base_dim: int = 5, n_gens: int = 10_000, seed: int = 0,
                       sigma: float = 0.1, alpha: float = 0.05, n_pairs: int = 5,
                       shaping: str = "raw"):
    """One-step updates from a fixed start with independent noise per copy.

    Returns ``(dw_base, ds_dup)``: ``(n_gens, base_dim)`` arrays of the base
    update to ``w`` and the duplicated run's update to ``s = w1 + w2`` under
    the variance-matched rule.
    """
    X, y, _ = regression_problem(base_dim, seed=seed)
    F = regression_fitness(X, y)
    F_dup = lambda w: F(w[:base_dim] + w[base_dim:])  # noqa: E731
    rng = np.random.default_rng(derive_key(seed, 3))
    w0 = np.zeros(base_dim)
    d0 = np.zeros(2 * base_dim)
    dw = np.empty((n_gens, base_dim))
    ds = np.empty((n_gens, base_dim))
    for k in range(n_gens):
        dw[k] = _es_step(F, w0, sigma, alpha, rng.standard_normal((n_pairs, base_dim)),
                         shaping) - w0
        new = _es_step(F_dup, d0, sigma / np.sqrt(2.0), alpha / 2,
                       rng.standard_normal((n_pairs, 2 * base_dim)), shaping)
        ds[k] = new[:base_dim] + new[base_dim:]
    return dw, ds


def perturbed_prediction_variance(x, sigma: float, n: int = 100_000, seed: int = 0):
    """Empirical Var[x . noise] for the base and the duplicated (sigma/sqrt2) problems."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((n, x.size)) @ x * sigma
    xx = np.concatenate([x, x])
    dup = rng.standard_normal((n, xx.size)) @ xx * (sigma / np.sqrt(2.0))
    return float(base.var()), float(dup.var())


# --- frame skip -----------------------------------------------------------------------

# Linear force controller on a 500-step cart-pole; rewards and the horizon are
# counted in simulator steps so returns are comparable across skips.

FRAMESKIP_CONFIG = """
[run]
checkpoint_every = 1000000
[es]
sigma = 0.1
alpha = 0.3
pop_pairs = 10
l2_coeff = 0.0
[noise]
length = 1000000
[policy]
hidden =
[env]
name = pole
horizon = 500
"""


def updates_to_threshold(cfg, threshold: float, budget: int,
                         table: Optional[NoiseTable] = None) -> tuple[int, bool]:
    """Generations until the mean population return reaches ``threshold``."""
    es = cfg.es_config()
    problem = training.make_problem(cfg)
    table = table or training.table_for(cfg)
    state = training.initial_state(cfg, problem)
    seed = cfg["run"]["seed"]
    for _ in range(budget):
        results = training.evaluate_local(state, es, table, problem, seed)
        state = training.advance(state, es, table, results)
        if np.mean([r.value for r in results]) >= threshold:
            return state.t, True
    return budget, False


def frameskip_sweep(skips=(1, 2, 3, 4), threshold: float = 450.0, budget: int = 300,
                    seeds=(0, 1, 2, 3, 4), base: Optional[config_mod.RunConfig] = None,
                    out: Optional[str] = None) -> dict:
    """Updates-to-threshold for each frame skip and seed on cart-pole.

    Returns ``{"rows": [(skip, seed, updates, reached)], "median": {skip: median}}``.
    """
    base = base or config_mod.parse(FRAMESKIP_CONFIG)
    table = training.table_for(base)
    rows = []
    for k in skips:
        for s in seeds:
            cfg = config_mod.parse(config_mod.dump(base))
            cfg.sections["env"]["frameskip"] = k
            cfg.sections["run"]["seed"] = s
            n, ok = updates_to_threshold(cfg, threshold, budget, table)
            rows.append((k, s, n, int(ok)))
            log.info("skip=%d seed=%d updates=%d reached=%s", k, s, n, ok)
    medians = {k: statistics.median(r[2] for r in rows if r[0] == k) for k in skips}
    if out:
        write_csv(out, "frameskip", rows)
    return {"rows": rows, "median": medians}


# --- scaling --------------------------------------------------------------------------

def sleepy_sphere(d: int, eval_ms: float) -> training.Problem:
    """Sphere objective that sleeps ``eval_ms`` per evaluation (synthetic cost)."""
    def evaluate(params, _seed, _cap):
        time.sleep(eval_ms / 1e3)
        return envs.RolloutResult(envs.blackbox_eval("sphere", params), 1, False)
    return training.Problem(d, envs.blackbox_start("sphere", d), evaluate)


def scaling_bench(worker_counts=(1, 2, 4, 8), eval_ms: float = 10.0, n_pairs: int = 64,
                  generations: int = 2, d: int = 10, seed: int = 0,
                  out: Optional[str] = None) -> dict:
    """Wall-clock per generation on the in-process backend for several worker counts.

    Returns ``{"rows": [(workers, gen_ms, efficiency)], "checksums": {workers: digest}}``.
    """
    from esscale.distrib import run_inproc
    from esscale.estimator import OptimizerState

    es = EsConfig(sigma=0.1, pop_pairs=n_pairs)
    table = build_table(7, 1 << 16)
    problem = sleepy_sphere(d, eval_ms)
    state0 = training.TrainState(ParamVector(problem.theta0.copy(), 0), OptimizerState.zeros(d))
    rows, checksums, base_ms = [], {}, None
    for k in worker_counts:
        times: list[float] = []
        run = run_inproc(es, table, problem, state0, seed, generations, k,
                         on_generation=lambda st, res, ms: times.append(ms))
        gen_ms = statistics.median(times)
        if base_ms is None:
            base_ms = gen_ms * worker_counts[0]
        eff = base_ms / (k * gen_ms)
        rows.append((k, round(gen_ms, 3), round(eff, 4)))
        checksums[k] = run.state.checksum()
        log.info("workers=%d gen_ms=%.1f efficiency=%.3f", k, gen_ms, eff)
    if out:
        write_csv(out, "scaling", rows)
    return {"rows": rows, "checksums": checksums}
