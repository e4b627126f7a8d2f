import csv

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import norm

from esscale import envs
from esscale import experiments as ex


def test_saturated_policy_has_no_gradient():
    for theta in [(20.0, 0.0), (-20.0, 0.0)]:
        g = ex.pg_gradient_reinforce(theta, 10, 2000, seed=1, tau=1.0)
        assert np.linalg.norm(g.values) < 1e-3


def test_exact_return_single_step_closed_form():
    theta, tau = np.array([0.7, -0.2]), 0.5
    closed = 0.5 * (expit((theta[0] + theta[1]) / tau) + 1 - expit((-theta[0] + theta[1]) / tau))
    assert ex.expected_return_exact(theta, 1, tau) == pytest.approx(closed, rel=1e-12)


def test_exact_return_by_simulation():
    # Monte Carlo through the step-wise environment, an independent path
    rng = np.random.default_rng(0)
    theta, tau, T, n = np.array([0.4, 0.1]), 1.0, 4, 40_000
    env = envs.ChainEnv(T)
    total = 0.0
    for k in range(n):
        obs = env.reset(k)
        done = False
        while not done:
            a = float(rng.random() < expit((theta[0] * obs[0] + theta[1]) / tau))
            obs, r, done = env.step([a])
        total += r
    mc = total / n
    assert abs(mc - ex.expected_return_exact(theta, T, tau)) < 4 * np.sqrt(0.25 / n)


def test_reinforce_matches_finite_differences():
    theta, T, tau = np.array([0.3, -0.1]), 3, 1.0
    fd = ex.finite_difference_gradient(theta, T, tau)
    est = ex.pg_estimates(theta, T, 200, 1000, seed=4, tau=tau)
    mean, se = est.mean(axis=0), est.std(axis=0, ddof=1) / np.sqrt(len(est))
    assert np.all(np.abs(mean - fd) < 4 * se)


def test_baseline_keeps_expectation_and_cuts_variance():
    theta, T = (0.2, 0.0), 100
    a = ex.pg_estimates(theta, T, 400, 10, seed=2, baseline="none")
    b = ex.pg_estimates(theta, T, 400, 10, seed=2, baseline="mean_return")
    se = np.sqrt(a.var(axis=0) / 400 + b.var(axis=0) / 400)
    assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) < 4 * se)
    assert np.all(b.var(axis=0) < 0.75 * a.var(axis=0))


def test_baseline_arguments():
    with pytest.raises(ValueError):
        ex.pg_estimates((0, 0), 3, 2, 1, seed=0)
    with pytest.raises(ValueError):
        ex.pg_estimates((0, 0), 3, 2, 4, seed=0, baseline="critic")


def test_return_variances_against_simulation():
    rng = np.random.default_rng(3)
    sigma, n = 0.5, 400_000
    eps = rng.standard_normal((n, 2))
    o = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    q = np.mean(1.0 + sigma * (eps[:, 0] * o + eps[:, 1]) * o < 0)
    assert ex.es_return_variance(sigma) == pytest.approx(q * (1 - q), rel=0.02)
    assert ex.pg_return_variance(1.0) == pytest.approx(expit(-1) * expit(1), rel=1e-12)


def test_calibrated_temperature():
    tau = ex.calibrate_tau(0.1)
    assert tau == pytest.approx(0.03585, rel=1e-3)
    # independent check: equal wrong-action probabilities
    assert expit(-1 / tau) == pytest.approx(norm.cdf(-1 / (0.1 * np.sqrt(2))), rel=1e-6)
    with pytest.raises(ValueError):
        ex.calibrate_tau(0.0)


def test_variance_sweep_small(tmp_path):
    reps = ex.variance_sweep(T_list=(1, 20), n_samples=100, out=tmp_path / "v.csv")
    by = {(r.T, r.kind): r.var_mean for r in reps}
    assert by[20, "pg"] > 3 * by[1, "pg"]
    assert by[20, "es"] < 2 * by[1, "es"]
    rows = list(csv.reader(open(tmp_path / "v.csv")))
    assert rows[0] == ["T", "kind", "var_mean", "n"] and len(rows) == 5
    with pytest.raises(ValueError):
        ex.variance_sweep(n_samples=10)


def test_duplicated_prediction_variance():
    base, dup = ex.perturbed_prediction_variance(np.array([0.5, -1.0, 2.0]), 0.1, n=200_000)
    assert dup == pytest.approx(base, rel=0.02)
    assert base == pytest.approx(0.01 * 5.25, rel=0.02)


def test_coupled_duplicate_tracks_base(tmp_path):
    rep = ex.dup_feature_check(n_steps=50, out=tmp_path / "d.csv")
    assert rep.max_divergence < 1e-9
    assert rep.max_divergence_halving > 1e-3
    assert rep.rows[0] == (0, 0.0, 0.0)
    assert next(csv.reader(open(tmp_path / "d.csv"))) == [
        "step", "pred_divergence", "pred_divergence_halving"]


def test_duplicated_expected_update():
    dw, ds = ex.dup_update_samples(n_gens=4000)
    se = np.sqrt(dw.var(axis=0, ddof=1) / len(dw) + ds.var(axis=0, ddof=1) / len(ds))
    assert np.all(np.abs(dw.mean(axis=0) - ds.mean(axis=0)) < 3 * se)


def test_frameskip_sweep_shape(tmp_path):
    res = ex.frameskip_sweep(skips=(1, 2), seeds=(0,), threshold=1e9, budget=2,
                             out=tmp_path / "f.csv")
    assert res["rows"] == [(1, 0, 2, 0), (2, 0, 2, 0)]
    assert res["median"] == {1: 2, 2: 2}


def test_scaling_checksums_agree():
    res = ex.scaling_bench(worker_counts=(1, 2, 4), eval_ms=0.0, n_pairs=16)
    assert len(set(res["checksums"].values())) == 1
    assert res["rows"][0][2] == 1.0


def test_single_worker_generation_time():
    res = ex.scaling_bench(worker_counts=(1,), eval_ms=10.0, n_pairs=64, generations=1)
    assert res["rows"][0][1] == pytest.approx(1280.0, rel=0.10)
