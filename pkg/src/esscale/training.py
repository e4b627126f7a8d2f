"""Run state and the per-generation fold shared by every backend.

The single-process loop, the coordinator and each worker all advance a
:class:`TrainState` through :func:`advance`, which is what makes their
parameter trajectories bit-identical.
"""
from __future__ import annotations

import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from esscale import envs, policy
from esscale.config import RunConfig
from esscale.envs import EpisodeCap, RolloutResult, update_cap
from esscale.estimator import (EsConfig, EvalResult, OptimizerState, ParamVector,
                               canonical, evaluate_slots, fold_results, theta_checksum)
from esscale.noise import NoiseTable, build_table, plan_refs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainState:
    theta: ParamVector
    opt: OptimizerState
    cap: Optional[EpisodeCap] = None

    @property
    def t(self) -> int:
        return self.theta.version

    def checksum(self) -> int:
        return theta_checksum(self.theta)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        cap = self.cap
        np.savez(buf, theta=self.theta.values, version=self.theta.version,
                 step=self.opt.step,
                 m=self.opt.m if self.opt.m is not None else np.zeros(0),
                 v=self.opt.v if self.opt.v is not None else np.zeros(0),
                 cap=np.array([cap.m, cap.mean_steps, cap.factor, cap.floor]
                              if cap is not None else []))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TrainState":
        with np.load(io.BytesIO(blob)) as z:
            d = z["theta"].shape[0]
            m = z["m"] if z["m"].shape[0] == d else None
            v = z["v"] if z["v"].shape[0] == d else None
            c = z["cap"]
            cap = EpisodeCap(int(c[0]), float(c[1]), float(c[2]), int(c[3])) if c.size else None
            return cls(ParamVector(z["theta"].copy(), int(z["version"])),
                       OptimizerState(int(z["step"]), m, v), cap)


def advance(state: TrainState, cfg: EsConfig, table: NoiseTable, results) -> TrainState:
    """Fold one generation of results; the episode cap sees lengths in canonical order."""
    ordered = canonical(results)
    theta, opt, _ = fold_results(state.theta, state.opt, cfg, table, ordered)
    cap = state.cap
    if cap is not None:
        for r in ordered:
            cap = update_cap(cap, max(int(r.steps), 1))
    return TrainState(theta, opt, cap)


@dataclass
class Problem:
    """What is being optimized: dimension, start point and an evaluator.

    ``evaluate(params, seed, cap)`` returns a :class:`RolloutResult`.
    """

    d: int
    theta0: np.ndarray
    evaluate: Callable[[np.ndarray, int, Optional[int]], RolloutResult]
    uses_cap: bool = False
    horizon: int = 1


def make_problem(cfg: RunConfig) -> Problem:
    env = cfg["env"]
    name = env["name"]
    seed = cfg["run"]["seed"]
    if name in envs.BLACKBOX:
        def evaluate(params, _seed, _cap):
            return RolloutResult(envs.blackbox_eval(name, params), 1, False)
        return Problem(env["dim"], envs.blackbox_start(name, env["dim"]), evaluate)
    if name == "chain":
        T = env["chain_T"]

        def evaluate(params, ep_seed, _cap):
            return envs.chain_eval(params, T, ep_seed)
        return Problem(2, np.zeros(2), evaluate, horizon=T)
    pole_cfg = cfg.pole_config()
    spec = cfg.policy_spec()
    if cfg["policy"]["vbn"]:
        ref = policy.build_reference(spec, envs.PoleBalance(pole_cfg), seed,
                                     cfg["policy"]["vbn_batch"])
        spec = spec.with_reference(ref)
    skip = env["frameskip"]

    def evaluate(params, ep_seed, cap):
        return envs.pole_rollout(spec, params, ep_seed, cap, skip, pole_cfg)
    theta0 = policy.init_params(spec, seed)
    return Problem(policy.param_count(spec), theta0, evaluate, uses_cap=cfg["cap"]["enabled"],
                   horizon=pole_cfg.horizon)


def initial_state(cfg: RunConfig, problem: Problem) -> TrainState:
    d = problem.d
    cap = None
    if problem.uses_cap:
        c = cfg["cap"]
        mean = c["initial_mean"] if c["initial_mean"] is not None else problem.horizon / 2.0
        cap = EpisodeCap.start(mean, c["factor"], c["floor"])
    return TrainState(ParamVector(np.array(problem.theta0, dtype=np.float64), 0),
                      OptimizerState.zeros(d), cap)


def table_for(cfg: RunConfig) -> NoiseTable:
    return build_table(cfg["noise"]["seed"], cfg["noise"]["length"])


def evaluate_local(state: TrainState, es: EsConfig, table: NoiseTable, problem: Problem,
                   run_seed: int, slots=None) -> list[EvalResult]:
    refs = plan_refs(run_seed, state.t, es.pop_pairs, table.length, problem.d)
    cap = state.cap.m if state.cap is not None else None
    slots = range(len(refs)) if slots is None else slots
    return evaluate_slots(state.theta, es, table,
                          lambda p, s: problem.evaluate(p, s, cap), run_seed, refs, slots)


def progress_record(state: TrainState, results, wall_ms: float, timesteps_total: int) -> dict:
    raw = np.array([r.value for r in results])
    return {
        "t": state.t,
        "mean_return": float(raw.mean()),
        "max_return": float(raw.max()),
        "timesteps_total": int(timesteps_total),
        "wall_ms": round(wall_ms, 3),
        "theta_checksum": f"{state.checksum():016x}",
    }


class ProgressLog:
    """Append-only JSON-lines progress file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict):
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line]


CHECKPOINT_NAME = "checkpoint.npz"


def save_checkpoint(out_dir, state: TrainState, timesteps_total: int):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / (CHECKPOINT_NAME + ".tmp")
    tmp.write_bytes(state.to_bytes() + timesteps_total.to_bytes(8, "little"))
    tmp.replace(out / CHECKPOINT_NAME)


def load_checkpoint(out_dir) -> tuple[TrainState, int]:
    blob = (Path(out_dir) / CHECKPOINT_NAME).read_bytes()
    return TrainState.from_bytes(blob[:-8]), int.from_bytes(blob[-8:], "little")


def run_single(cfg: RunConfig, updates: Optional[int] = None, resume: bool = False,
               out_dir=None, table: Optional[NoiseTable] = None,
               stop: Callable[[], bool] = lambda: False) -> TrainState:
    """Single-process loop: mirrored sampling, shaping, update, log, checkpoint."""
    es = cfg.es_config()
    problem = make_problem(cfg)
    table = table or table_for(cfg)
    run_seed = cfg["run"]["seed"]
    out_dir = Path(out_dir or cfg["run"]["out"])
    updates = cfg["run"]["updates"] if updates is None else updates
    every = cfg["run"]["checkpoint_every"]
    progress = ProgressLog(out_dir / "progress.jsonl")
    timesteps = 0
    logged = max((r["t"] for r in progress.read()), default=0) if resume else 0
    if resume and (out_dir / CHECKPOINT_NAME).exists():
        state, timesteps = load_checkpoint(out_dir)
        log.info("resumed at t=%d", state.t)
    else:
        state = initial_state(cfg, problem)
        if progress.path.exists():
            progress.path.unlink()
    while state.t < updates and not stop():
        start = time.perf_counter()
        results = evaluate_local(state, es, table, problem, run_seed)
        state = advance(state, es, table, results)
        timesteps += sum(r.steps for r in results)
        if state.t > logged:
            # records past the checkpoint are recomputed identically; keep the originals
            progress.append(progress_record(state, results,
                                            (time.perf_counter() - start) * 1e3, timesteps))
        if state.t % every == 0:
            save_checkpoint(out_dir, state, timesteps)
    save_checkpoint(out_dir, state, timesteps)
    return state
