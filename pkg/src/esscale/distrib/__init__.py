"""Parallel ES over a star topology: one coordinator, many workers.

Only scalars travel per episode; COMMIT relays the whole generation's
(offset, sign, return) bundle so that every node folds the same update.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from esscale.distrib.coordinator import ConsistencyError, Coordinator, QuorumError
from esscale.distrib.protocol import ProtocolError
from esscale.distrib.transport import InprocListener
from esscale.distrib.worker import Rejected, Worker
from esscale.estimator import EsConfig
from esscale.noise import NoiseTable
from esscale.training import Problem, TrainState

__all__ = ["ConsistencyError", "Coordinator", "InprocRun", "ProtocolError", "QuorumError",
           "Rejected", "Worker", "run_inproc"]


@dataclass
class InprocRun:
    state: TrainState
    worker_states: list = field(default_factory=list)
    worker_errors: list = field(default_factory=list)
    rejected_results: int = 0


def run_inproc(es: EsConfig, table: NoiseTable, problem: Problem, state: TrainState,
               run_seed: int, updates: int, n_workers: int, shuffle: bool = False,
               fail_after: Optional[dict] = None, late_workers: int = 0,
               on_generation: Optional[Callable] = None, timeout: float = 30.0) -> InprocRun:
    """Run the full protocol with worker threads talking over in-process channels.

    Args:
        n_workers: Workers required before the first generation.
        shuffle: Workers send each batch of results in a seeded random order.
        fail_after: ``{worker_index: k}`` kills that worker after k RESULTs.
        late_workers: Extra workers that connect after the run has started.
    """
    fail_after = fail_after or {}
    listener = InprocListener()
    coord = Coordinator(es, table, state, run_seed, listener, n_workers,
                        join_timeout=timeout, on_generation=on_generation)
    coord.start()
    outcome = InprocRun(state)
    lock = threading.Lock()

    def serve(i: int):
        w = Worker(es, table, problem, listener.connect(), worker_id=i,
                   shuffle_seed=i if shuffle else None, fail_after=fail_after.get(i))
        try:
            final = w.run()
        except Exception as exc:  # recorded for the caller; injected faults land here
            with lock:
                outcome.worker_errors.append((i, exc))
            return
        with lock:
            outcome.worker_states.append((i, final))

    threads = [threading.Thread(target=serve, args=(i,), daemon=True)
               for i in range(n_workers + late_workers)]
    for th in threads[:n_workers]:
        th.start()
    for th in threads[n_workers:]:
        # the coordinator is already accepting; these join while generations run
        th.start()
    outcome.state = coord.run(updates)
    for th in threads:
        th.join(timeout)
    outcome.worker_states.sort(key=lambda p: p[0])
    outcome.rejected_results = coord.rejected_results
    return outcome
