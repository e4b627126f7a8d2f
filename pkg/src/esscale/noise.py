"""Shared Gaussian noise table and compact perturbation handles.

Every node builds the same table from ``(seed, length)``, so a perturbation is
fully identified by a :class:`PerturbationRef` (an offset and a sign) and only
scalars ever need to cross the network.

Generator: sample ``i`` of the underlying integer stream is the splitmix64
output ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15)``.  Pairs of 53-bit uniforms
from counters ``2p`` and ``2p + 1`` go through Box-Muller; the cosine branch
fills slot ``2p`` and the sine branch slot ``2p + 1``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from esscale import kernels

MASK64 = (1 << 64) - 1
DEFAULT_TABLE_LENGTH = 10_000_000


class NoiseError(ValueError):
    """Invalid table or perturbation arguments."""


def mix64(z: int) -> int:
    """splitmix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_key(*parts: int) -> int:
    """Hash a tuple of non-negative ints into a 64-bit stream key."""
    h = 0x243F6A8885A308D3
    for p in parts:
        h = mix64(h ^ mix64((p + 0x9E3779B97F4A7C15) & MASK64))
    return h


@dataclass(frozen=True)
class NoiseTable:
    seed: int
    length: int
    values: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        self.values.setflags(write=False)

    def fingerprint(self) -> int:
        digest = hashlib.blake2b(self.values.tobytes(), digest_size=8).digest()
        return int.from_bytes(digest, "little")


def build_table(seed: int, length: int = DEFAULT_TABLE_LENGTH) -> NoiseTable:
    """Generate the shared noise block; identical bytes for identical inputs."""
    if not isinstance(length, (int, np.integer)) or length < 1:
        raise NoiseError(f"table length must be >= 1, got {length!r}")
    if not 0 <= seed <= MASK64:
        raise NoiseError(f"seed must be a 64-bit unsigned int, got {seed!r}")
    try:
        values = kernels.normal_table(int(seed), int(length))
    except MemoryError as exc:
        raise MemoryError(f"cannot allocate noise table of length {length}") from exc
    return NoiseTable(int(seed), int(length), np.ascontiguousarray(values))


@dataclass
class Stream:
    """Caller-owned counter-based random stream (key, position)."""

    key: int
    counter: int = 0

    def next_u64(self) -> int:
        out = mix64((self.key + (self.counter + 1) * 0x9E3779B97F4A7C15) & MASK64)
        self.counter += 1
        return out

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection."""
        if n < 1:
            raise NoiseError("empty range")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def copy(self) -> "Stream":
        return Stream(self.key, self.counter)


@dataclass(frozen=True, order=True)
class PerturbationRef:
    offset: int
    sign: int = 1
    subset_seed: Optional[int] = None
    density: float = 1.0

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise NoiseError(f"sign must be +1 or -1, got {self.sign!r}")
        if self.offset < 0:
            raise NoiseError("offset must be non-negative")

    @property
    def key(self) -> tuple[int, int]:
        """Canonical sort key: ascending offset, then sign."""
        return (self.offset, self.sign)


def draw_ref(table: NoiseTable, d: int, stream: Stream) -> PerturbationRef:
    """Draw an offset uniformly from ``[0, length - d]``; advances ``stream``."""
    if d < 1 or d > table.length:
        raise NoiseError(f"dimension {d} does not fit in table of length {table.length}")
    return PerturbationRef(stream.below(table.length - d + 1), 1)


def mirror_ref(ref: PerturbationRef) -> PerturbationRef:
    return PerturbationRef(ref.offset, -ref.sign, ref.subset_seed, ref.density)


def subset_mask(subset_seed: int, d: int, density: float) -> np.ndarray:
    """Bernoulli(density) coordinate mask from the stream keyed by ``subset_seed``."""
    raw = kernels.splitmix64_at(subset_seed, np.arange(d, dtype=np.uint64))
    u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    return u < density


def materialize(table: NoiseTable, ref: PerturbationRef, d: int) -> np.ndarray:
    """Reconstruct the perturbation vector named by ``ref``."""
    if ref.offset + d > table.length or d < 1:
        raise NoiseError(f"ref offset {ref.offset} + d {d} exceeds table length {table.length}")
    eps = table.values[ref.offset:ref.offset + d] * float(ref.sign)
    if ref.subset_seed is not None:
        eps = np.where(subset_mask(ref.subset_seed, d, ref.density), eps, 0.0)
    return eps


def slot_ref(run_seed: int, generation: int, slot: int, table_length: int, d: int,
             taken: Optional[set] = None) -> PerturbationRef:
    """Positive ref for ``slot`` of ``generation``; redraws on offsets in ``taken``.

    Depends only on (run_seed, generation, slot) and the earlier slots'
    offsets, never on which worker evaluates it.
    """
    if d > table_length:
        raise NoiseError(f"dimension {d} does not fit in table of length {table_length}")
    stream = Stream(derive_key(run_seed, generation, slot, 0))
    span = table_length - d + 1
    while True:
        off = stream.below(span)
        if taken is None or off not in taken:
            return PerturbationRef(off, 1)
        if len(taken) >= span:
            raise NoiseError("table too short for distinct refs in one generation")


def plan_refs(run_seed: int, generation: int, n_pairs: int, table_length: int,
              d: int) -> list[PerturbationRef]:
    """Distinct positive refs for every slot of a generation, in slot order."""
    taken: set[int] = set()
    refs = []
    for slot in range(n_pairs):
        ref = slot_ref(run_seed, generation, slot, table_length, d, taken)
        taken.add(ref.offset)
        refs.append(ref)
    return refs


def episode_seed(run_seed: int, generation: int, slot: int) -> int:
    """Environment seed shared by both mirrors of a slot (common random numbers)."""
    return derive_key(run_seed, generation, slot, 1)
