"""Worker side: evaluate assigned slots, replay every COMMIT locally."""
from __future__ import annotations

import logging
import random
import threading
from typing import Callable, Optional

from esscale.distrib.coordinator import ConsistencyError
from esscale.distrib.protocol import (ERR_CHECKSUM, ERR_PROTOCOL, PROTO_VERSION, Assign, Bye,
                                      Commit, Error, Hello, ProtocolError, Result, Sync)
from esscale.distrib.transport import ChannelClosed
from esscale.estimator import EsConfig, EvalResult
from esscale.noise import NoiseTable, PerturbationRef
from esscale.training import Problem, TrainState, advance, evaluate_local

log = logging.getLogger(__name__)


class Rejected(RuntimeError):
    """The coordinator refused the handshake."""


class Worker:
    """Runs one connection until BYE.

    Args:
        es: ES hyperparameters (must match the coordinator's).
        table: Shared noise table.
        problem: Evaluator and dimension.
        channel: A connected transport channel.
        worker_id: Informational id sent in HELLO.
        shuffle_seed: If set, results of each ASSIGN are sent in a shuffled order.
        fail_after: If set, close the channel after sending this many RESULTs.
    """

    def __init__(self, es: EsConfig, table: NoiseTable, problem: Problem, channel,
                 worker_id: int = 0, shuffle_seed: Optional[int] = None,
                 fail_after: Optional[int] = None):
        self.es = es
        self.table = table
        self.problem = problem
        self.channel = channel
        self.worker_id = worker_id
        self.rng = random.Random(shuffle_seed) if shuffle_seed is not None else None
        self.fail_after = fail_after
        self.sent = 0
        self.state: Optional[TrainState] = None
        self.run_seed = 0
        self.commits = 0

    def handshake(self):
        self.channel.send(Hello(self.worker_id, PROTO_VERSION, self.table.seed,
                                self.table.length, self.problem.d))
        msg = self.channel.recv()
        if isinstance(msg, Error):
            raise Rejected(msg.text)
        if not isinstance(msg, Sync):
            raise ProtocolError(f"expected SYNC, got {type(msg).__name__}")
        self.state = TrainState.from_bytes(msg.state)
        self.run_seed = msg.run_seed
        if self.state.t != msg.generation:
            raise ProtocolError("SYNC generation does not match its state")

    def _evaluate(self, msg: Assign):
        if msg.generation != self.state.t:
            self.channel.send(Error(ERR_PROTOCOL, msg.generation,
                                    f"assigned generation {msg.generation}, at {self.state.t}"))
            raise ProtocolError(f"ASSIGN for generation {msg.generation} at {self.state.t}")
        slots = range(msg.rng_stream_id, msg.rng_stream_id + msg.n_pairs)
        results = evaluate_local(self.state, self.es, self.table, self.problem, self.run_seed,
                                 slots)
        if self.rng is not None:
            self.rng.shuffle(results)
        for r in results:
            if self.fail_after is not None and self.sent >= self.fail_after:
                self.channel.close()
                raise ChannelClosed("injected failure")
            self.channel.send(Result(msg.generation, r.ref.offset, r.ref.sign, r.value,
                                     r.steps, r.truncated))
            self.sent += 1

    def _commit(self, msg: Commit):
        if msg.generation != self.state.t:
            raise ProtocolError(f"COMMIT for generation {msg.generation} at {self.state.t}")
        results = [EvalResult(PerturbationRef(e.offset, e.sign), e.ret, e.steps, e.truncated)
                   for e in msg.results]
        new_state = advance(self.state, self.es, self.table, results)
        got = new_state.checksum()
        if got != msg.update_checksum:
            text = f"update checksum {got:016x} != {msg.update_checksum:016x}"
            self.channel.send(Error(ERR_CHECKSUM, msg.generation, text))
            raise ConsistencyError(text)
        self.state = new_state
        self.commits += 1

    def run(self) -> TrainState:
        """Serve until BYE; returns the final replicated state."""
        if self.state is None:
            self.handshake()
        while True:
            msg = self.channel.recv()
            if msg is None:
                raise ChannelClosed("coordinator went away")
            if isinstance(msg, Assign):
                self._evaluate(msg)
            elif isinstance(msg, Commit):
                self._commit(msg)
            elif isinstance(msg, Bye):
                self.channel.close()
                return self.state
            elif isinstance(msg, Error):
                raise ProtocolError(f"coordinator error {msg.code}: {msg.text}")
            else:
                raise ProtocolError(f"unexpected {type(msg).__name__}")


def serve_forever(connect: Callable[[], object], make_worker: Callable[[object], Worker],
                  retries: int = 5, backoff: float = 0.5,
                  stop: Callable[[], bool] = lambda: False) -> Optional[TrainState]:
    """Connect, serve, and reconnect after a lost connection (up to ``retries``)."""
    failures = 0
    while not stop():
        try:
            channel = connect()
        except OSError as exc:
            failures += 1
            if failures > retries:
                raise
            log.warning("connect failed (%s), retrying", exc)
            threading.Event().wait(backoff * failures)
            continue
        try:
            return make_worker(channel).run()
        except (ChannelClosed, ConnectionError) as exc:
            failures += 1
            if failures > retries:
                raise
            log.warning("connection lost (%s), reconnecting", exc)
            threading.Event().wait(backoff)
    return None
