"""Pure-Python/numpy implementations of the hot kernels.

These are the reference semantics; ``_ckernels.pyx`` mirrors them.  The noise
generator and the noise accumulation are bit-identical between the two
backends (same integer hashing, same libm calls, same summation order).
Rollouts agree to rounding only, since the MLP dot products are summed in a
different order by BLAS.
"""
import math

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
TWO_PI = 6.283185307179586
INV_2_53 = 1.0 / 9007199254740992.0


def splitmix64_at(seed, index):
    """Return outputs ``index`` of the splitmix64 stream seeded with ``seed``.

    ``index`` may be a numpy integer array; arithmetic wraps modulo 2**64.
    """
    idx = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + (idx + np.uint64(1)) * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def normal_table(seed, length):
    """Standard normals via Box-Muller over a counter-based splitmix64 stream.

    Pair ``p`` consumes counters ``2p`` and ``2p + 1``; element ``2p`` is the
    cosine branch and ``2p + 1`` the sine branch.
    """
    npairs = (length + 1) // 2
    counters = np.arange(2 * npairs, dtype=np.uint64)
    raw = splitmix64_at(seed, counters)
    u = (raw >> np.uint64(11)).astype(np.float64) * INV_2_53
    u1 = 1.0 - u[0::2]
    u2 = u[1::2]
    # log/cos/sin must come from libm to match the compiled kernel bit for bit
    logs = np.fromiter(map(math.log, u1.tolist()), dtype=np.float64, count=npairs)
    r = np.sqrt(-2.0 * logs)
    angle = TWO_PI * u2
    angles = angle.tolist()
    cos = np.fromiter(map(math.cos, angles), dtype=np.float64, count=npairs)
    sin = np.fromiter(map(math.sin, angles), dtype=np.float64, count=npairs)
    out = np.empty(2 * npairs, dtype=np.float64)
    out[0::2] = r * cos
    out[1::2] = r * sin
    return out[:length]


def weighted_noise_sum(values, offsets, weights, d):
    """Return ``sum_i weights[i] * values[offsets[i]:offsets[i] + d]`` in index order."""
    out = np.zeros(d, dtype=np.float64)
    for off, w in zip(offsets.tolist(), weights.tolist()):
        out += w * values[off:off + d]
    return out


def pole_step(state, force, gravity, masscart, masspole, length, dt):
    """Semi-implicit Euler step of the cart-pole ODE; ``state`` is (x, x_dot, th, th_dot)."""
    x, x_dot, th, th_dot = state
    total_mass = masscart + masspole
    pml = masspole * length
    costh = math.cos(th)
    sinth = math.sin(th)
    temp = (force + pml * th_dot * th_dot * sinth) / total_mass
    th_acc = (gravity * sinth - costh * temp) / (
        length * (4.0 / 3.0 - masspole * costh * costh / total_mass))
    x_acc = temp - pml * th_acc * costh / total_mass
    x_dot = x_dot + dt * x_acc
    x = x + dt * x_dot
    th_dot = th_dot + dt * th_acc
    th = th + dt * th_dot
    return (x, x_dot, th, th_dot)


def _mlp_action(theta, layer_sizes, vbn_mean, vbn_std, centers, low, high, obs):
    x = np.asarray(obs, dtype=np.float64)
    pos = 0
    n_in = layer_sizes[0]
    if vbn_mean is not None:
        gamma = theta[pos:pos + n_in]
        beta = theta[pos + n_in:pos + 2 * n_in]
        pos += 2 * n_in
        x = (x - vbn_mean) / vbn_std * gamma + beta
    n_layers = len(layer_sizes) - 1
    for li in range(n_layers):
        a, b = layer_sizes[li], layer_sizes[li + 1]
        w = theta[pos:pos + a * b].reshape(a, b)
        pos += a * b
        bias = theta[pos:pos + b]
        pos += b
        x = x @ w + bias
        if li < n_layers - 1:
            x = np.tanh(x)
    if centers is None:
        return min(max(float(x[0]), low), high)
    return float(centers[int(np.argmax(x))])


def pole_rollout(theta, layer_sizes, vbn_mean, vbn_std, centers, low, high,
                 state0, consts, horizon, cap, frameskip):
    """Run one cart-pole episode under a deterministic MLP policy.

    Args:
        theta: flat policy parameters.
        layer_sizes: ``[obs_dim, *hidden, n_out]``; ``n_out`` is 1 for
            continuous force or the bin count when ``centers`` is given.
        vbn_mean, vbn_std: reference statistics (``std`` already includes the
            stabilizer) or None.
        centers: bin centres for discretized actions, or None.
        state0: initial (x, x_dot, th, th_dot).
        consts: (gravity, masscart, masspole, length, force_mag, dt,
            x_limit, theta_limit).
        horizon: episode length limit in simulator steps.
        cap: step cap (<= 0 disables).
        frameskip: simulator steps per decision.

    Returns:
        (total_return, steps, truncated)
    """
    gravity, masscart, masspole, length, force_mag, dt, x_limit, th_limit = consts
    state = tuple(float(s) for s in state0)
    limit = horizon if cap <= 0 else min(horizon, cap)
    total = 0.0
    steps = 0
    done = False
    while not done and steps < limit:
        force = _mlp_action(theta, layer_sizes, vbn_mean, vbn_std, centers, low, high, state)
        force = min(max(force, -force_mag), force_mag)
        for _ in range(frameskip):
            state = pole_step(state, force, gravity, masscart, masspole, length, dt)
            steps += 1
            if abs(state[2]) < th_limit and abs(state[0]) < x_limit:
                total += 1.0
            else:
                done = True
            if done or steps >= limit:
                break
    truncated = (not done) and steps >= limit and limit < horizon
    return total, steps, truncated
