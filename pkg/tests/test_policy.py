import numpy as np
import pytest
from hypothesis import given, strategies as st

from esscale import envs
from esscale.policy import (VBN_EPS, PolicyError, PolicySpec, ReferenceBatch, build_reference,
                            discretize_bounds, flatten, forward, forward_batch, init_params,
                            param_count, unflatten)


def test_param_count_examples():
    spec = PolicySpec(obs_dim=3, hidden=(2,))
    assert param_count(spec) == 11
    ref = ReferenceBatch.from_observations(np.arange(6.0).reshape(2, 3))
    assert param_count(spec.with_reference(ref)) == 17
    big = PolicySpec(obs_dim=4, action_dim=2, hidden=(64, 64), action_mode="discretized",
                     bins=10)
    # counting rule recomputed term by term
    assert param_count(big) == 4 * 64 + 64 + 64 * 64 + 64 + 64 * 20 + 20 == 5780


def test_discretize_examples():
    np.testing.assert_allclose(discretize_bounds(1, 10, -1, 1)[0],
                               [-0.9, -0.7, -0.5, -0.3, -0.1, 0.1, 0.3, 0.5, 0.7, 0.9],
                               atol=1e-15)
    assert discretize_bounds(1, 2, 0, 1)[0].tolist() == [0.25, 0.75]
    with pytest.raises(PolicyError):
        discretize_bounds(1, 1, 0, 1)
    with pytest.raises(PolicyError):
        discretize_bounds(1, 4, 1, 1)


def test_spec_validation():
    for bad in (dict(hidden=(0,)), dict(action_mode="x"), dict(action_mode="discretized",
                                                              bins=1), dict(low=1, high=0)):
        with pytest.raises(PolicyError):
            PolicySpec(obs_dim=2, **bad)


def test_zero_theta_outputs():
    spec = PolicySpec(obs_dim=3, hidden=(5,))
    assert forward(spec, np.zeros(param_count(spec)), np.ones(3)).tolist() == [0.0]
    disc = PolicySpec(obs_dim=3, hidden=(5,), action_mode="discretized", bins=10)
    # all scores tie, lowest bin wins
    assert forward(disc, np.zeros(param_count(disc)), np.ones(3)).tolist() == [
        pytest.approx(-0.9, abs=1e-15)]


def mlp_oracle(spec, theta, obs):
    """Independent forward pass written from the layout description."""
    pos = 0
    x = np.asarray(obs, dtype=float)
    if spec.vbn is not None:
        g = theta[:spec.obs_dim]
        b = theta[spec.obs_dim:2 * spec.obs_dim]
        pos = 2 * spec.obs_dim
        x = (x - spec.vbn.mean) / np.sqrt(spec.vbn.var + spec.vbn.eps) * g + b
    sizes = [spec.obs_dim, *spec.hidden, spec.n_out]
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        W = np.array(theta[pos:pos + n_in * n_out]).reshape(n_in, n_out)
        pos += n_in * n_out
        bias = theta[pos:pos + n_out]
        pos += n_out
        x = sum(x[j] * W[j] for j in range(n_in)) + bias
        if i < len(sizes) - 2:
            x = np.tanh(x)
    return x


@pytest.mark.parametrize("mode", ["continuous", "discretized"])
def test_forward_matches_oracle(mode):
    ref = ReferenceBatch.from_observations(np.random.default_rng(1).normal(size=(20, 4)))
    spec = PolicySpec(obs_dim=4, action_dim=2, hidden=(6, 5), action_mode=mode, bins=4,
                      low=-2, high=2, vbn=ref)
    rng = np.random.default_rng(2)
    theta = rng.normal(size=param_count(spec))
    for _ in range(10):
        obs = rng.normal(size=4)
        raw = mlp_oracle(spec, theta, obs)
        if mode == "continuous":
            expect = np.clip(raw, -2, 2)
        else:
            centers = np.array([-1.5, -0.5, 0.5, 1.5])
            expect = centers[np.argmax(raw.reshape(2, 4), axis=1)]
        np.testing.assert_allclose(forward(spec, theta, obs), expect, rtol=1e-12, atol=1e-12)


def test_forward_errors():
    spec = PolicySpec(obs_dim=2, hidden=(3,))
    theta = np.zeros(param_count(spec))
    with pytest.raises(PolicyError):
        forward(spec, theta, np.zeros(3))
    with pytest.raises(PolicyError):
        forward(spec, theta, np.array([0.0, np.nan]))
    with pytest.raises(PolicyError):
        forward(spec, theta[:-1], np.zeros(2))


@given(st.integers(1, 5), st.lists(st.integers(1, 6), max_size=3), st.integers(1, 3),
       st.booleans(), st.integers(0, 2 ** 32 - 1))
def test_flatten_round_trip(obs_dim, hidden, action_dim, vbn, seed):
    ref = ReferenceBatch.from_observations(np.ones((2, obs_dim))) if vbn else None
    spec = PolicySpec(obs_dim=obs_dim, action_dim=action_dim, hidden=tuple(hidden), vbn=ref)
    theta = np.random.default_rng(seed).normal(size=param_count(spec))
    assert np.array_equal(flatten(spec, unflatten(spec, theta)), theta)


def test_init_params_layout():
    ref = ReferenceBatch.from_observations(np.ones((2, 3)))
    spec = PolicySpec(obs_dim=3, hidden=(4,), vbn=ref)
    parts = unflatten(spec, init_params(spec, 0))
    assert parts["gamma"].tolist() == [1, 1, 1] and parts["beta"].tolist() == [0, 0, 0]
    (w0, b0), (w1, b1) = parts["layers"]
    assert np.all(np.abs(w0) <= 1 / np.sqrt(3)) and np.all(np.abs(w1) <= 1 / 2)
    assert not b0.any() and not b1.any()
    assert np.array_equal(init_params(spec, 0), init_params(spec, 0))


class ConstantEnv:
    obs_dim = 2

    def reset(self, seed=0):
        return np.array([3.0, -1.0])

    def step(self, action):
        return np.array([3.0, -1.0]), 0.0, False


def test_reference_degenerate_variance():
    spec = PolicySpec(obs_dim=2, hidden=(2,))
    ref = build_reference(spec, ConstantEnv(), 0, 16)
    assert ref.var.tolist() == [0.0, 0.0]
    vspec = spec.with_reference(ref)
    theta = init_params(vspec, 0)
    parts = unflatten(vspec, theta)
    from esscale.policy import normalize
    z = normalize(vspec, parts, np.array([3.0 + 1e-3, -1.0]))
    assert z[0] == pytest.approx(1e-3 / np.sqrt(VBN_EPS))


def test_reference_statistics_deterministic_and_normalizing():
    spec = PolicySpec(obs_dim=4, hidden=(8,), low=-10, high=10)
    a = build_reference(spec, envs.PoleBalance(), 1, 128)
    b = build_reference(spec, envs.PoleBalance(), 1, 128)
    assert a.mean.tobytes() == b.mean.tobytes() and a.var.tobytes() == b.var.tobytes()
    assert a.observations.shape == (128, 4)
    vspec = spec.with_reference(a)
    parts = unflatten(vspec, init_params(vspec, 0))
    from esscale.policy import normalize
    z = normalize(vspec, parts, a.observations)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.var(axis=0), 1 / (1 + VBN_EPS / a.var), atol=1e-10)
    theta = init_params(vspec, 3)
    obs = a.observations[5]
    assert forward(vspec, theta, obs).tobytes() == forward(vspec, theta, obs).tobytes()


def test_reference_is_immutable():
    ref = ReferenceBatch.from_observations(np.ones((3, 2)))
    with pytest.raises(ValueError):
        ref.mean[0] = 2.0


def test_vbn_perturbation_sensitivity():
    spec = PolicySpec(obs_dim=4, hidden=(64, 64), action_mode="discretized", bins=10,
                      low=-10, high=10)
    ref = build_reference(spec, envs.PoleBalance(), 1, 128)
    spec = spec.with_reference(ref)
    theta = init_params(spec, 0)
    probe = ref.observations[::16]
    base = forward_batch(spec, theta, probe)
    rng = np.random.default_rng(0)
    changed = sum(
        not np.array_equal(forward_batch(spec, theta + 0.02 * rng.standard_normal(theta.size),
                                         probe), base)
        for _ in range(1000))
    assert changed / 1000 >= 0.10


def test_discretized_forward_piecewise_constant():
    spec = PolicySpec(obs_dim=3, hidden=(4,), action_mode="discretized", bins=5)
    theta = init_params(spec, 1)
    obs = np.array([0.3, -0.2, 0.1])
    base = forward(spec, theta, obs)
    rng = np.random.default_rng(0)
    delta = 1.0
    while delta > 1e-12:
        pert = [forward(spec, theta + delta * u / np.linalg.norm(u), obs)
                for u in rng.normal(size=(50, theta.size))]
        if all(np.array_equal(p, base) for p in pert):
            break
        delta /= 2
    assert delta > 1e-12
