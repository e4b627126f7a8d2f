"""Coordinator side of the parallel ES protocol.

Workers connect, say HELLO and receive a SYNC with the current run state.
Each generation the coordinator splits the slot range over the live workers,
gathers exactly two RESULTs per slot, folds them in canonical order and
broadcasts a COMMIT that relays every (offset, sign, return) so each worker
can recompute the update and check the digest.
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from typing import Callable, Optional

from esscale.distrib.protocol import (ERR_CHECKSUM, ERR_REJECTED, PROTO_VERSION, Assign,
                                      BundleEntry, Bye, Commit, Error, Hello, ProtocolError,
                                      Result, Sync)
from esscale.estimator import EsConfig, EvalResult, canonical
from esscale.noise import NoiseTable, PerturbationRef, plan_refs
from esscale.training import TrainState, advance

log = logging.getLogger(__name__)


class QuorumError(RuntimeError):
    """Not enough workers connected in time."""


class ConsistencyError(RuntimeError):
    """A worker computed a different update than the coordinator."""


def split_slots(slots: list[int], n_workers: int) -> list[list[int]]:
    """Contiguous, near-equal chunks (earlier chunks take the remainder)."""
    base, extra = divmod(len(slots), n_workers)
    out, pos = [], 0
    for i in range(n_workers):
        size = base + (1 if i < extra else 0)
        out.append(slots[pos:pos + size])
        pos += size
    return out


def runs(slots: list[int]) -> list[tuple[int, int]]:
    """Group sorted slots into (first, count) runs for ASSIGN messages."""
    out: list[tuple[int, int]] = []
    for s in sorted(slots):
        if out and out[-1][0] + out[-1][1] == s:
            out[-1] = (out[-1][0], out[-1][1] + 1)
        else:
            out.append((s, 1))
    return out


class Coordinator:
    def __init__(self, es: EsConfig, table: NoiseTable, state: TrainState, run_seed: int,
                 listener, expected_workers: int, join_timeout: float = 30.0,
                 on_generation: Optional[Callable] = None):
        self.es = es
        self.table = table
        self.state = state
        self.run_seed = run_seed
        self.d = state.theta.d
        self.listener = listener
        self.expected_workers = expected_workers
        self.join_timeout = join_timeout
        self.on_generation = on_generation
        self.events: queue.Queue = queue.Queue()
        self.lock = threading.Lock()
        self.live: dict[int, object] = {}
        self.next_id = 0
        self.stopping = threading.Event()
        self.rejected_results = 0
        self._accept_thread: Optional[threading.Thread] = None

    # --- connection handling -------------------------------------------

    def start(self):
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True,
                                               name="es-accept")
        self._accept_thread.start()

    def _accept_loop(self):
        while not self.stopping.is_set():
            ch = self.listener.accept(timeout=0.2)
            if ch is None:
                continue
            threading.Thread(target=self._serve, args=(ch,), daemon=True).start()

    def _handshake_ok(self, hello) -> Optional[str]:
        if not isinstance(hello, Hello):
            return "expected HELLO"
        if hello.proto_version != PROTO_VERSION:
            return f"protocol version {hello.proto_version} != {PROTO_VERSION}"
        if (hello.table_seed, hello.table_len) != (self.table.seed, self.table.length):
            return "noise table mismatch"
        if hello.d != self.d:
            return f"dimension {hello.d} != {self.d}"
        return None

    def _serve(self, ch):
        try:
            hello = ch.recv()
        except ProtocolError as exc:
            log.warning("dropping connection: %s", exc)
            ch.close()
            return
        problem = self._handshake_ok(hello) if hello is not None else "closed"
        if problem is not None:
            log.warning("rejecting worker: %s", problem)
            try:
                ch.send(Error(ERR_REJECTED, self.state.t, problem))
            except ConnectionError:
                pass
            ch.close()
            return
        with self.lock:
            wid = self.next_id
            self.next_id += 1
            ch.send(Sync(self.state.t, self.run_seed, self.state.to_bytes()))
            self.live[wid] = ch
        log.info("worker %d joined (hello id %d)", wid, hello.worker_id)
        self.events.put(("join", wid, None))
        while True:
            try:
                msg = ch.recv()
            except (ProtocolError, ConnectionError) as exc:
                log.warning("worker %d: %s", wid, exc)
                msg = None
            if msg is None:
                self.events.put(("dead", wid, None))
                return
            self.events.put(("msg", wid, msg))

    def _drop(self, wid: int):
        with self.lock:
            ch = self.live.pop(wid, None)
        if ch is not None:
            ch.close()

    def wait_for_quorum(self):
        deadline = time.monotonic() + self.join_timeout
        while len(self.live) < self.expected_workers:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise QuorumError(
                    f"only {len(self.live)} of {self.expected_workers} workers joined "
                    f"within {self.join_timeout}s")
            try:
                kind, wid, _ = self.events.get(timeout=remaining)
            except queue.Empty:
                continue
            if kind == "dead":
                self._drop(wid)

    # --- generations ---------------------------------------------------

    def _assign(self, wid: int, slots: list[int], t: int, owner: dict):
        ch = self.live.get(wid)
        for first, count in runs(slots):
            ch.send(Assign(t, count, first))
        for s in slots:
            owner[s] = wid

    def run_generation(self) -> list[EvalResult]:
        t = self.state.t
        refs = plan_refs(self.run_seed, t, self.es.pop_pairs, self.table.length, self.d)
        slot_of = {}
        for slot, ref in enumerate(refs):
            slot_of[(ref.offset, 1)] = slot
            slot_of[(ref.offset, -1)] = slot
        received: dict[tuple[int, int], Result] = {}
        owner: dict[int, int] = {}
        with self.lock:
            workers = sorted(self.live)
        if not workers:
            raise QuorumError("no live workers")
        for wid, chunk in zip(workers, split_slots(list(range(len(refs))), len(workers))):
            if chunk:
                self._assign(wid, chunk, t, owner)
        orphans: list[int] = []
        need = 2 * len(refs)
        while len(received) < need:
            try:
                kind, wid, msg = self.events.get(timeout=self.join_timeout)
            except queue.Empty:
                raise QuorumError(f"generation {t} stalled") from None
            if kind == "dead":
                self._drop(wid)
                lost = [s for s, w in owner.items() if w == wid and not self._slot_done(
                    refs[s], received)]
                orphans.extend(lost)
            elif kind == "msg":
                self._handle(msg, t, slot_of, received)
            if orphans:
                with self.lock:
                    alive = sorted(self.live)
                if alive:
                    log.info("reassigning slots %s of generation %d", orphans, t)
                    for w, chunk in zip(alive, split_slots(sorted(orphans), len(alive))):
                        if chunk:
                            self._assign(w, chunk, t, owner)
                    orphans = []
        results = [EvalResult(PerturbationRef(r.offset, r.sign), r.ret, r.steps, r.truncated)
                   for r in received.values()]
        return results

    @staticmethod
    def _slot_done(ref: PerturbationRef, received) -> bool:
        return (ref.offset, 1) in received and (ref.offset, -1) in received

    def _handle(self, msg, t: int, slot_of: dict, received: dict):
        if isinstance(msg, Result):
            key = (msg.offset, msg.sign)
            if msg.generation != t or key not in slot_of:
                self.rejected_results += 1
                log.warning("rejected RESULT %s for generation %d (current %d)", key,
                            msg.generation, t)
            elif key in received:
                self.rejected_results += 1
                log.info("rejected duplicate RESULT %s", key)
            else:
                received[key] = msg
        elif isinstance(msg, Error):
            if msg.code == ERR_CHECKSUM:
                raise ConsistencyError(f"worker reported checksum mismatch at generation "
                                       f"{msg.generation}: {msg.text}")
            log.warning("worker error %d: %s", msg.code, msg.text)
        else:
            log.warning("unexpected %s from worker", type(msg).__name__)

    def commit(self, results: list[EvalResult]) -> TrainState:
        ordered = canonical(results)
        new_state = advance(self.state, self.es, self.table, ordered)
        bundle = tuple(BundleEntry(r.ref.offset, r.ref.sign, r.value, r.steps, r.truncated)
                       for r in ordered)
        msg = Commit(self.state.t, len(bundle), new_state.checksum(), bundle)
        with self.lock:
            self.state = new_state
            for wid, ch in list(self.live.items()):
                try:
                    ch.send(msg)
                except ConnectionError:
                    self.events.put(("dead", wid, None))
        return new_state

    def run(self, updates: int, stop: Callable[[], bool] = lambda: False) -> TrainState:
        """Drive generations until ``state.t == updates`` or ``stop()``; always says BYE."""
        if self._accept_thread is None:
            self.start()
        try:
            self.wait_for_quorum()
            while self.state.t < updates and not stop():
                start = time.perf_counter()
                results = self.run_generation()
                state = self.commit(results)
                if self.on_generation is not None:
                    self.on_generation(state, results, (time.perf_counter() - start) * 1e3)
            self._drain_errors()
        finally:
            self.shutdown()
        return self.state

    def _drain_errors(self):
        """Pick up checksum reports for the final COMMIT before saying BYE."""
        deadline = time.monotonic() + 0.05
        while time.monotonic() < deadline:
            try:
                kind, wid, msg = self.events.get(timeout=0.01)
            except queue.Empty:
                continue
            if kind == "msg" and isinstance(msg, Error) and msg.code == ERR_CHECKSUM:
                raise ConsistencyError(f"worker reported checksum mismatch at generation "
                                       f"{msg.generation}: {msg.text}")

    def shutdown(self):
        self.stopping.set()
        with self.lock:
            for ch in self.live.values():
                try:
                    ch.send(Bye())
                except ConnectionError:
                    pass
            self.live.clear()
        self.listener.close()
