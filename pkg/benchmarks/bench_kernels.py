"""Time the compiled kernels against the pure-Python fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 3]

Each row reports the best wall time per backend, the speedup and whether
the two backends produced identical output (bitwise for the noise table and
the accumulation, to rounding for the MLP rollout).
"""
import argparse
import time

import numpy as np

from esscale import kernels
from esscale.envs import PoleConfig, pole_initial_state
from esscale.policy import PolicySpec, init_params


def best_of(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases():
    table = kernels.python.normal_table(7, 1_000_000)
    offsets = np.arange(0, 900_000, 9_000, dtype=np.int64)
    weights = np.linspace(-1.0, 1.0, offsets.size)

    spec = PolicySpec(obs_dim=4, hidden=(32, 32), low=-10.0, high=10.0)
    theta = init_params(spec, 0)
    sizes = np.array(spec.layer_sizes, dtype=np.int64)
    cfg = PoleConfig(horizon=1000)

    def rollout(impl):
        # zero cap disables capping; ten seeded episodes
        return [impl.pole_rollout(theta, sizes, None, None, None, spec.low, spec.high,
                                  pole_initial_state(s, cfg), cfg.consts, cfg.horizon, 0, 1)
                for s in range(10)]

    return [
        ("normal_table 1e6", lambda k: k.normal_table(7, 1_000_000), "bitwise"),
        ("weighted_noise_sum 100x10k", lambda k: k.weighted_noise_sum(table, offsets, weights,
                                                                      10_000), "bitwise"),
        ("pole_rollout 10 eps", rollout, "close"),
    ]


def same(a, b, mode):
    if mode == "bitwise":
        return np.array_equal(np.asarray(a), np.asarray(b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-9)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    if kernels.compiled is None:
        print("compiled extension not available; build with `pip install -e .`")
        return 1
    print(f"{'kernel':<28} {'cython s':>10} {'python s':>10} {'speedup':>8}  match")
    for name, fn, mode in cases():
        tc, oc = best_of(lambda: fn(kernels.compiled), args.repeat)
        tp, op = best_of(lambda: fn(kernels.python), args.repeat)
        print(f"{name:<28} {tc:>10.4f} {tp:>10.4f} {tp / tc:>8.1f}  {same(oc, op, mode)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
