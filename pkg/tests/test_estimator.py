import numpy as np
import pytest
from hypothesis import given, strategies as st

from esscale.estimator import (EsConfig, EvalResult, EvaluationError, GradientEstimate,
                               NumericError, OptimizerState, ParamVector, ProtocolError,
                               apply_update, centered_ranks, es_gradient, fold_results,
                               generation, noise_gradient, shape_returns, theta_checksum)
from esscale.noise import NoiseTable, PerturbationRef, materialize, mirror_ref, plan_refs


def rank_oracle(x):
    """Average 0-based ranks by brute force."""
    x = list(x)
    n = len(x)
    out = []
    for v in x:
        below = sum(1 for w in x if w < v)
        ties = sum(1 for w in x if w == v)
        out.append(below + (ties - 1) / 2)
    return np.array(out) / (n - 1) - 0.5 if n > 1 else np.zeros(1)


def test_centered_rank_examples():
    assert centered_ranks([3.0, 1.0, 2.0]).tolist() == [0.5, -0.5, 0.0]
    assert centered_ranks([5.0] * 4).tolist() == [0.0] * 4
    assert np.array_equal(centered_ranks([1, 10, 100]), centered_ranks([-3, 0, 7]))
    assert centered_ranks([4.2]).tolist() == [0.0]


@given(st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=40))
def test_centered_ranks_match_oracle(x):
    u = centered_ranks(x)
    np.testing.assert_allclose(u, rank_oracle(x), atol=1e-15)
    assert u.min() >= -0.5 and u.max() <= 0.5
    assert abs(u.sum()) <= len(x) * np.finfo(float).eps


def test_centered_ranks_nan():
    with pytest.raises(ValueError):
        centered_ranks([1.0, np.nan])


def test_shape_rejects_nonfinite():
    with pytest.raises(NumericError):
        shape_returns([1.0, np.inf], EsConfig())


def test_config_validation():
    for bad in (dict(sigma=0), dict(alpha=-1), dict(pop_pairs=0), dict(l2_coeff=-0.1),
                dict(shaping="x"), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            EsConfig(**bad)


def unit_table():
    v = np.zeros(10)
    v[0], v[5], v[6] = 1.0, 1.0, 2.0
    return NoiseTable(0, 10, v)


def test_gradient_single_entry_example():
    g = noise_gradient([(PerturbationRef(0, 1), 2.0)], 0.5, unit_table(), 2)
    assert g.values.tolist() == [4.0, 0.0] and g.n_used == 1


def test_gradient_pair_example():
    pos = PerturbationRef(5, 1)
    g = es_gradient([(pos, 1.0, mirror_ref(pos), -1.0)], EsConfig(sigma=1.0), unit_table(), 2)
    assert g.values.tolist() == [1.0, 2.0]


def test_gradient_mirror_mismatch():
    with pytest.raises(ProtocolError):
        es_gradient([(PerturbationRef(5, 1), 1.0, PerturbationRef(6, -1), 0.0)],
                    EsConfig(), unit_table(), 2)
    with pytest.raises(ValueError):
        es_gradient([], EsConfig(), unit_table(), 2)


def test_gradient_matches_dense_formula(table):
    d = 50
    rng = np.random.default_rng(0)
    refs = plan_refs(1, 0, 30, table.length, d)
    entries = [(r, float(rng.normal())) for r in refs] + \
              [(mirror_ref(r), float(rng.normal())) for r in refs]
    dense = sum(u * materialize(table, r, d) for r, u in entries) / (len(entries) * 0.3)
    np.testing.assert_allclose(noise_gradient(entries, 0.3, table, d).values, dense,
                               rtol=1e-12, atol=1e-14)


def test_quadratic_blurred_gradient(table):
    # E[F(theta + sigma eps)] = F(theta) - sigma^2 * d for F = -|x|^2, gradient -2 theta
    d, sigma = 10, 0.1
    theta = np.zeros(d)
    theta[0] = 1.0
    cfg = EsConfig(sigma=sigma, pop_pairs=10_000, shaping="raw")
    refs = plan_refs(11, 0, cfg.pop_pairs, table.length, d)
    results = []
    for r in refs:
        for ref in (r, mirror_ref(r)):
            x = theta + sigma * materialize(table, ref, d)
            results.append(EvalResult(ref, -float(x @ x)))
    g = noise_gradient([(r.ref, r.value) for r in results], sigma, table, d).values
    target = -2 * theta
    assert np.linalg.norm(g - target) / np.linalg.norm(target) < 0.05


def test_linear_exactness(big_table):
    # few overlapping windows in a 10^7 table, so the pairs are close to independent
    d, sigma = 4, 0.05
    a = np.array([1.0, -2.0, 0.5, 3.0])
    refs = plan_refs(5, 0, 100_000, big_table.length, d)
    eps = np.array([materialize(big_table, r, d) for r in refs])
    per_pair = ((eps * sigma) @ a - (-eps * sigma) @ a)[:, None] / (2 * sigma) * eps
    se = per_pair.std(axis=0, ddof=1) / np.sqrt(len(per_pair))
    assert np.all(np.abs(per_pair.mean(axis=0) - a) <= 3 * se)


def test_sgd_examples():
    th, _ = apply_update(ParamVector(np.array([1.0])), GradientEstimate(np.array([2.0]), 1),
                         EsConfig(alpha=0.1, l2_coeff=0.0, optimizer="sgd"), OptimizerState())
    assert th.values.tolist() == [pytest.approx(1.2, abs=1e-15)] and th.version == 1
    th, _ = apply_update(ParamVector(np.array([2.0])), GradientEstimate(np.array([0.0]), 1),
                         EsConfig(alpha=1.0, l2_coeff=0.5, optimizer="sgd"), OptimizerState())
    assert th.values.tolist() == [1.0]


def adam_oracle(grads, alpha, b1=0.9, b2=0.999, eps=1e-8, lam=0.0, theta0=0.0):
    theta, m, v = theta0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        theta = (1 - alpha * lam) * theta + alpha * step
    return theta


def test_adam_first_step():
    th, st = apply_update(ParamVector(np.array([0.0])), GradientEstimate(np.array([10.0]), 1),
                          EsConfig(alpha=0.01, l2_coeff=0.0), OptimizerState())
    assert th.values[0] == pytest.approx(0.01, rel=1e-6)
    assert st.step == 1


def test_adam_matches_oracle_over_steps():
    grads = [10.0, -3.0, 0.5, 7.0, -1.0]
    cfg = EsConfig(alpha=0.05, l2_coeff=0.01)
    th, st = ParamVector(np.array([0.3])), OptimizerState()
    for g in grads:
        th, st = apply_update(th, GradientEstimate(np.array([g]), 1), cfg, st)
    assert th.values[0] == pytest.approx(adam_oracle(grads, 0.05, lam=0.01, theta0=0.3),
                                         rel=1e-12)


def test_momentum():
    cfg = EsConfig(alpha=0.1, l2_coeff=0.0, optimizer="momentum", momentum=0.5)
    th, st = ParamVector(np.array([0.0])), OptimizerState()
    for g in (1.0, 1.0):
        th, st = apply_update(th, GradientEstimate(np.array([g]), 1), cfg, st)
    assert th.values[0] == pytest.approx(0.1 * 1 + 0.1 * 1.5)


def test_update_rejects_nonfinite():
    with pytest.raises(NumericError):
        apply_update(ParamVector(np.array([1.0])), GradientEstimate(np.array([np.nan]), 1),
                     EsConfig(optimizer="sgd"), OptimizerState())
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        apply_update(ParamVector(np.array([1e308])), GradientEstimate(np.array([1e308]), 1),
                     EsConfig(optimizer="sgd", alpha=10.0, l2_coeff=0.0), OptimizerState())
    with pytest.raises(NumericError):
        ParamVector(np.array([np.inf]))


def sphere(x, _seed):
    return -float(x @ x)


def test_constant_fitness_pure_decay(table):
    cfg = EsConfig(sigma=0.1, alpha=0.2, l2_coeff=0.05, pop_pairs=8)
    theta = ParamVector(np.linspace(-1, 1, 20))
    th, _, stats = generation(theta, OptimizerState.zeros(20), cfg, table, lambda x, s: 3.0)
    assert np.array_equal(th.values, (1 - 0.2 * 0.05) * theta.values)
    assert stats["n_evals"] == 16


def test_generation_deterministic(table):
    cfg = EsConfig(sigma=0.1, alpha=0.05, pop_pairs=10)
    theta = ParamVector(np.ones(30))
    a = generation(theta, OptimizerState.zeros(30), cfg, table, sphere, run_seed=4)[0]
    b = generation(theta, OptimizerState.zeros(30), cfg, table, sphere, run_seed=4)[0]
    assert a.values.tobytes() == b.values.tobytes()
    assert theta_checksum(a) == theta_checksum(b)


def test_evaluator_failure_carries_ref(table):
    def boom(x, s):
        raise RuntimeError("env crashed")
    with pytest.raises(EvaluationError) as info:
        generation(ParamVector(np.ones(3)), OptimizerState.zeros(3), EsConfig(pop_pairs=2),
                   table, boom)
    assert isinstance(info.value.ref, PerturbationRef)


def _gen_results(table, d, n_pairs, values):
    refs = plan_refs(9, 0, n_pairs, table.length, d)
    out = []
    for r, (vp, vn) in zip(refs, values):
        out += [EvalResult(r, vp), EvalResult(mirror_ref(r), vn)]
    return out


def _fold(table, results, d=12, **kw):
    cfg = EsConfig(sigma=0.05, alpha=0.03, **kw)
    theta = ParamVector(np.linspace(-0.5, 0.5, d), 3)
    return fold_results(theta, OptimizerState.zeros(d), cfg, table, results)[0]


returns = st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1,
                   max_size=12)


@given(returns, st.randoms(use_true_random=False))
def test_permutation_invariance(table, vals, rnd):
    res = _gen_results(table, 12, len(vals), vals)
    shuffled = list(res)
    rnd.shuffle(shuffled)
    assert _fold(table, res).values.tobytes() == _fold(table, shuffled).values.tobytes()


@given(returns, st.floats(-1e3, 1e3))
def test_monotone_and_offset_invariance(table, vals, c):
    res = _gen_results(table, 12, len(vals), vals)
    base = _fold(table, res).values.tobytes()
    cubed = [EvalResult(r.ref, r.value ** 3 + 2 * r.value) for r in res]
    assert _fold(table, cubed).values.tobytes() == base
    # a shift that keeps distinct values distinct and ties tied
    shifted = [EvalResult(r.ref, r.value + c) for r in res]
    if len({r.value + c for r in res}) == len({r.value for r in res}) and \
            all((a.value < b.value) == (a.value + c < b.value + c) for a in res for b in res):
        assert _fold(table, shifted).values.tobytes() == base


def test_fold_rejects_bad_generations(table):
    res = _gen_results(table, 12, 2, [(1.0, 2.0), (3.0, 4.0)])
    with pytest.raises(ProtocolError):
        _fold(table, res + [res[0]])
    with pytest.raises(ProtocolError):
        _fold(table, res[:-1])


def test_subset_masked_coordinates_get_zero(table):
    d = 40
    refs = [PerturbationRef(o, 1, subset_seed=77, density=0.3) for o in (10, 500, 9000)]
    res = []
    for i, r in enumerate(refs):
        res += [EvalResult(r, float(i)), EvalResult(mirror_ref(r), -float(i))]
    g = fold_results(ParamVector(np.zeros(d)), OptimizerState.zeros(d),
                     EsConfig(optimizer="sgd", l2_coeff=0.0), table, res)[2]
    mask = materialize(table, refs[0], d) != 0
    assert np.all(g.values[~mask] == 0.0)
    assert np.any(g.values[mask] != 0.0)
