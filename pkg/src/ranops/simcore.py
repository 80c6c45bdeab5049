"""Deterministic discrete-event backbone: virtual clock, event queue, seeded streams.

Virtual time is integer nanoseconds since the simulation epoch. There is no
floating-point clock anywhere in the engine, so replays are bit-exact across
platforms. Simultaneous events run in the order they were scheduled (a
monotone sequence counter breaks ties); that ordering is part of the replay
contract.
"""

from __future__ import annotations

import hashlib
import heapq
import struct
import time as _wall
from typing import Callable, Optional

import numpy as np

from .errors import SchedulingInPast

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

# heap entry slots: [fire_at, seq, action, args]
_AT, _SEQ, _ACTION, _ARGS = 0, 1, 2, 3


def s_to_ns(seconds) -> int:
    """Convert seconds (int or float) to integer nanoseconds, rounding."""
    return int(round(seconds * NS_PER_S))


def ms_to_ns(millis) -> int:
    return int(round(millis * NS_PER_MS))


def ns_to_s(nanos: int) -> float:
    return nanos / NS_PER_S


def rate_to_gap_ns(rate_per_s) -> int:
    """Inter-event gap for a rate in events/second, as exact integer ns.

    Integer rates use integer arithmetic (round half up) so the same rate
    always yields the same gap; 600/s gives 1_666_667 ns.
    """
    if rate_per_s <= 0:
        raise ValueError(f"rate must be positive, got {rate_per_s}")
    if isinstance(rate_per_s, int):
        return (NS_PER_S + rate_per_s // 2) // rate_per_s
    return int(round(NS_PER_S / rate_per_s))


class RandomStream:
    """Seeded random source with deterministic, independent substreams.

    A stream is identified by ``(seed, label)``. The underlying generator is
    a counter-based Philox keyed with ``SHA-256(seed || label)``, so the same
    pair yields the same draw sequence on every platform and any two distinct
    labels behave as independent streams. Children extend the label path:
    ``substream("mesh")`` of the root is the stream ``(seed, "root/mesh")``.

    Test vectors for this construction are pinned in docs/determinism.md.
    """

    __slots__ = ("seed", "label", "generator", "_buf", "_idx")

    _BLOCK = 4096

    def __init__(self, seed: int, label: str = "root"):
        if not label:
            raise ValueError("stream label must be non-empty")
        self.seed = int(seed)
        self.label = label
        digest = hashlib.sha256(
            struct.pack("<Q", self.seed & 0xFFFFFFFFFFFFFFFF) + b"\x1f" + label.encode("utf-8")
        ).digest()
        key = int.from_bytes(digest[:16], "little")
        self.generator = np.random.Generator(np.random.Philox(key=key))
        self._buf = ()
        self._idx = self._BLOCK

    def substream(self, label: str) -> "RandomStream":
        if not label:
            raise ValueError("stream label must be non-empty")
        return RandomStream(self.seed, f"{self.label}/{label}")

    def uniform(self) -> float:
        """Next uniform draw in [0, 1). Draws are block-buffered; the
        sequence is a pure function of (seed, label)."""
        if self._idx >= self._BLOCK:
            self._buf = self.generator.random(self._BLOCK).tolist()
            self._idx = 0
        value = self._buf[self._idx]
        self._idx += 1
        return value

    def uniforms(self, n: int) -> list:
        return [self.uniform() for _ in range(n)]

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, label={self.label!r})"


class EventHandle:
    """Cancellation handle for a scheduled event."""

    __slots__ = ("_entry",)

    def __init__(self, entry):
        self._entry = entry

    @property
    def fire_at(self) -> int:
        return self._entry[_AT]

    @property
    def cancelled(self) -> bool:
        return self._entry[_ACTION] is None

    def cancel(self):
        self._entry[_ACTION] = None
        self._entry[_ARGS] = None


class Simulator:
    """Single-threaded event loop over integer-nanosecond virtual time.

    One instance owns one simulation; instances share no mutable state, so
    scenario sweeps may run many of them in parallel processes.
    """

    def __init__(self, seed: int = 1):
        self.now: int = 0
        self.random = RandomStream(seed)
        self._heap: list = []
        self._seq: int = 0
        self._running = False
        self._executed: int = 0

    # -- scheduling ------------------------------------------------------

    def schedule(self, at: int, action: Callable, *args) -> EventHandle:
        """Schedule ``action(*args)`` to fire exactly once at virtual time ``at``."""
        if at < self.now:
            raise SchedulingInPast(f"cannot schedule at {at} ns; clock is at {self.now} ns")
        entry = [at, self._seq, action, args]
        self._seq += 1
        heapq.heappush(self._heap, entry)
        return EventHandle(entry)

    def schedule_in(self, delay: int, action: Callable, *args) -> EventHandle:
        return self.schedule(self.now + delay, action, *args)

    def pending(self) -> int:
        return sum(1 for e in self._heap if e[_ACTION] is not None)

    # -- execution -------------------------------------------------------

    def run_until(
        self,
        end: int,
        stop: Optional[Callable[[], bool]] = None,
        pace: Optional[float] = None,
    ) -> int:
        """Execute all events with fire_at <= end in (fire_at, seq) order.

        Returns the final clock: ``end`` when events remain beyond it, the
        time of the last executed event if the queue drained first, or the
        stopping event's time when ``stop()`` turned true. ``pace`` maps
        virtual seconds to wall time (pace=60 plays 60 virtual seconds per
        wall second); default is as fast as possible.
        """
        if self._running:
            raise RuntimeError("event loop is already running")
        self._running = True
        heap = self._heap
        pop = heapq.heappop
        wall_anchor = _wall.perf_counter()
        virt_anchor = self.now
        stopped = False
        try:
            while heap and heap[0][_AT] <= end:
                entry = pop(heap)
                action = entry[_ACTION]
                if action is None:
                    continue
                self.now = entry[_AT]
                if pace:
                    lag = (self.now - virt_anchor) / NS_PER_S / pace - (
                        _wall.perf_counter() - wall_anchor
                    )
                    if lag > 0.001:
                        _wall.sleep(lag)
                action(*entry[_ARGS])
                self._executed += 1
                if stop is not None and stop():
                    stopped = True
                    break
        finally:
            self._running = False
        if not stopped and heap and heap[0][_AT] > end:
            self.now = end
        return self.now

    def drain(self, extra_ns: int) -> int:
        """Run a bounded tail past the current clock (teardown, config pushes)."""
        return self.run_until(self.now + extra_ns)
