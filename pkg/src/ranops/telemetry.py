"""In-process observability: per-interval series, latency histograms, exports.

Every delivered or dropped message lands in exactly one per-interval sample of
one (service, version, direction) series, which is what makes the global
conservation identity an exact integer check. Exports are a pure function of
the recorded state: fixed column order, fixed formatting, rows sorted by
(series, interval), so identical runs produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

from .simcore import NS_PER_S

INGRESS = "ingress"
EGRESS = "egress"

DROP_QUEUE = "queue"
DROP_GATE = "gate"
DROP_UNDELIVERABLE = "undeliverable"

# Version tag of the reserved series that absorbs undeliverable messages
# (no subscriber for the destination host). Keeping them in a real series
# is what lets "sent == delivered + drops + undeliverable" hold exactly.
UNROUTED_VERSION = "-"

CSV_HEADER = (
    "t_start_ns,t_end_ns,service,version,direction,delivered,dropped_queue,"
    "dropped_gate,undeliverable,lat_mean_ns,lat_p50_ns,lat_p95_ns,lat_p99_ns,lat_max_ns"
)


def log_bucket_bounds(low_ns: int = 1_000, high_ns: int = 10_000_000_000, per_decade: int = 8):
    """Log-spaced histogram bucket boundaries, defaults spanning 1 us to 10 s."""
    bounds = []
    i = 0
    while True:
        b = int(round(low_ns * 10 ** (i / per_decade)))
        if b > high_ns:
            break
        bounds.append(b)
        i += 1
    return bounds

DEFAULT_BUCKET_BOUNDS = log_bucket_bounds()


def _bucket_index(bounds, value):
    # bisect_right inlined at call sites in the hot path; kept here for tests
    lo, hi = 0, len(bounds)
    while lo < hi:
        mid = (lo + hi) // 2
        if value < bounds[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


class SeriesAccumulator:
    """Sparse per-interval counters for one (service, version, direction)."""

    __slots__ = (
        "service", "version", "direction", "_interval_ns", "_bounds", "_nbuckets",
        "delivered", "dropped_queue", "dropped_gate", "undeliverable",
        "lat_sum", "lat_min", "lat_max", "hist",
    )

    def __init__(self, service, version, direction, interval_ns, bounds):
        self.service = service
        self.version = version
        self.direction = direction
        self._interval_ns = interval_ns
        self._bounds = bounds
        self._nbuckets = len(bounds) + 1
        self.delivered = {}
        self.dropped_queue = {}
        self.dropped_gate = {}
        self.undeliverable = {}
        self.lat_sum = {}
        self.lat_min = {}
        self.lat_max = {}
        self.hist = {}

    def add_delivery(self, t_ns: int, latency_ns: int):
        idx = t_ns // self._interval_ns
        self.delivered[idx] = self.delivered.get(idx, 0) + 1
        self.lat_sum[idx] = self.lat_sum.get(idx, 0) + latency_ns
        prev = self.lat_min.get(idx)
        if prev is None or latency_ns < prev:
            self.lat_min[idx] = latency_ns
        if latency_ns > self.lat_max.get(idx, -1):
            self.lat_max[idx] = latency_ns
        h = self.hist.get(idx)
        if h is None:
            h = self.hist[idx] = [0] * self._nbuckets
        bounds = self._bounds
        lo, hi = 0, len(bounds)
        while lo < hi:
            mid = (lo + hi) // 2
            if latency_ns < bounds[mid]:
                hi = mid
            else:
                lo = mid + 1
        h[lo] += 1

    def add_drop(self, t_ns: int, reason: str):
        idx = t_ns // self._interval_ns
        if reason == DROP_QUEUE:
            self.dropped_queue[idx] = self.dropped_queue.get(idx, 0) + 1
        elif reason == DROP_GATE:
            self.dropped_gate[idx] = self.dropped_gate.get(idx, 0) + 1
        else:
            self.undeliverable[idx] = self.undeliverable.get(idx, 0) + 1

    def last_index(self) -> int:
        last = -1
        for d in (self.delivered, self.dropped_queue, self.dropped_gate, self.undeliverable):
            if d:
                m = max(d)
                if m > last:
                    last = m
        return last

    def totals(self):
        return (
            sum(self.delivered.values()),
            sum(self.dropped_queue.values()),
            sum(self.dropped_gate.values()),
            sum(self.undeliverable.values()),
        )


@dataclass
class MetricSample:
    """One closed interval of one series.

    ``hist`` is the per-bucket latency count vector; quantiles derived from it
    are clamped to [lat_min, lat_max] so p50 <= p95 <= p99 <= max always holds.
    """

    t_start: int
    t_end: int
    service: str
    version: str
    direction: str
    delivered: int
    dropped_queue: int
    dropped_gate: int
    undeliverable: int
    lat_sum: int
    lat_min: Optional[int]
    lat_max: Optional[int]
    hist: Optional[list]
    bounds: Optional[list]

    @property
    def lat_mean_ns(self) -> int:
        if not self.delivered:
            return 0
        return (self.lat_sum + self.delivered // 2) // self.delivered

    def quantile_ns(self, q: float) -> int:
        if not self.delivered or not self.hist:
            return 0
        rank = max(1, int(q * self.delivered + 0.999999))
        if rank > self.delivered:
            rank = self.delivered
        cum = 0
        for b, count in enumerate(self.hist):
            cum += count
            if cum >= rank:
                if b < len(self.bounds):
                    est = self.bounds[b]
                else:
                    est = self.lat_max
                return max(self.lat_min, min(est, self.lat_max))
        return self.lat_max

    def merge(self, other: "MetricSample") -> "MetricSample":
        """Aggregate an adjacent sample into a union-window sample."""
        hist = None
        if self.hist and other.hist:
            hist = [a + b for a, b in zip(self.hist, other.hist)]
        else:
            hist = self.hist or other.hist
        mins = [m for m in (self.lat_min, other.lat_min) if m is not None]
        maxs = [m for m in (self.lat_max, other.lat_max) if m is not None]
        return MetricSample(
            t_start=min(self.t_start, other.t_start),
            t_end=max(self.t_end, other.t_end),
            service=self.service,
            version=self.version,
            direction=self.direction,
            delivered=self.delivered + other.delivered,
            dropped_queue=self.dropped_queue + other.dropped_queue,
            dropped_gate=self.dropped_gate + other.dropped_gate,
            undeliverable=self.undeliverable + other.undeliverable,
            lat_sum=self.lat_sum + other.lat_sum,
            lat_min=min(mins) if mins else None,
            lat_max=max(maxs) if maxs else None,
            hist=hist,
            bounds=self.bounds or other.bounds,
        )


class MetricsStore:
    """Single-writer metrics store; the event loop records, exports run after."""

    def __init__(self, interval_ns: int = NS_PER_S, bucket_bounds=None):
        if interval_ns <= 0:
            raise ValueError("interval must be positive")
        self.interval_ns = interval_ns
        self.bounds = list(bucket_bounds) if bucket_bounds is not None else list(DEFAULT_BUCKET_BOUNDS)
        self._series: dict = {}

    # -- recording -------------------------------------------------------

    def series(self, service: str, version: str, direction: str) -> SeriesAccumulator:
        key = (service, version, direction)
        acc = self._series.get(key)
        if acc is None:
            acc = self._series[key] = SeriesAccumulator(
                service, version, direction, self.interval_ns, self.bounds
            )
        return acc

    def record_delivery(self, service, version, direction, t_ns, latency_ns):
        self.series(service, version, direction).add_delivery(t_ns, latency_ns)

    def record_drop(self, service, version, direction, t_ns, reason):
        self.series(service, version, direction).add_drop(t_ns, reason)

    # -- querying --------------------------------------------------------

    def _sample(self, acc: SeriesAccumulator, idx: int) -> MetricSample:
        step = self.interval_ns
        return MetricSample(
            t_start=idx * step,
            t_end=(idx + 1) * step,
            service=acc.service,
            version=acc.version,
            direction=acc.direction,
            delivered=acc.delivered.get(idx, 0),
            dropped_queue=acc.dropped_queue.get(idx, 0),
            dropped_gate=acc.dropped_gate.get(idx, 0),
            undeliverable=acc.undeliverable.get(idx, 0),
            lat_sum=acc.lat_sum.get(idx, 0),
            lat_min=acc.lat_min.get(idx),
            lat_max=acc.lat_max.get(idx),
            hist=acc.hist.get(idx),
            bounds=self.bounds,
        )

    def query(self, service, version, direction, t_from: int, t_to: int):
        """Samples covering [t_from, t_to); gaps come back as explicit zeros."""
        acc = self.series(service, version, direction)
        lo = t_from // self.interval_ns
        hi = (t_to + self.interval_ns - 1) // self.interval_ns
        return [self._sample(acc, i) for i in range(lo, hi)]

    def window(self, service, version, direction, t_from, t_to) -> MetricSample:
        """One aggregate sample over [t_from, t_to)."""
        samples = self.query(service, version, direction, t_from, t_to)
        agg = samples[0]
        for s in samples[1:]:
            agg = agg.merge(s)
        return agg

    def error_fraction(self, service, version, t_from, t_to) -> float:
        """Processing-failure fraction: queue drops over (delivered + queue
        drops). Gate drops and undeliverables are excluded; an empty window
        is 0 by contract."""
        agg = self.window(service, version, INGRESS, t_from, t_to)
        denom = agg.delivered + agg.dropped_queue
        if denom == 0:
            return 0.0
        return agg.dropped_queue / denom

    def mean_latency_ns(self, service, version, direction, t_from, t_to) -> int:
        return self.window(service, version, direction, t_from, t_to).lat_mean_ns

    def totals(self):
        """(delivered, dropped_queue, dropped_gate, undeliverable) over all series."""
        agg = [0, 0, 0, 0]
        for acc in self._series.values():
            t = acc.totals()
            for i in range(4):
                agg[i] += t[i]
        return tuple(agg)

    def sorted_keys(self):
        return sorted(self._series.keys())

    def end_index(self, at_least_ns: int = 0) -> int:
        """First interval index past all recorded data (and past at_least_ns)."""
        last = (at_least_ns + self.interval_ns - 1) // self.interval_ns
        for acc in self._series.values():
            li = acc.last_index() + 1
            if li > last:
                last = li
        return last

    # -- export ----------------------------------------------------------

    def _rows(self, end_idx: int):
        for key in self.sorted_keys():
            acc = self._series[key]
            for idx in range(0, end_idx):
                s = self._sample(acc, idx)
                yield s

    def export_csv(self, path, end_ns: int):
        """Write the per-interval series table.

        Byte-stable: ns values are integers, rows sorted by (series, t_start),
        LF newlines. ``end_ns`` extends zero-filled rows to the run horizon.
        """
        end_idx = self.end_index(end_ns)
        with open(path, "w", newline="") as fh:
            fh.write(CSV_HEADER + "\n")
            for s in self._rows(end_idx):
                fh.write(
                    f"{s.t_start},{s.t_end},{s.service},{s.version},{s.direction},"
                    f"{s.delivered},{s.dropped_queue},{s.dropped_gate},{s.undeliverable},"
                    f"{s.lat_mean_ns},{s.quantile_ns(0.50)},{s.quantile_ns(0.95)},"
                    f"{s.quantile_ns(0.99)},{s.lat_max or 0}\n"
                )

    def export_jsonl(self, path, end_ns: int):
        end_idx = self.end_index(end_ns)
        with open(path, "w", newline="") as fh:
            for s in self._rows(end_idx):
                fh.write(json.dumps({
                    "t_start_ns": s.t_start,
                    "t_end_ns": s.t_end,
                    "service": s.service,
                    "version": s.version,
                    "direction": s.direction,
                    "delivered": s.delivered,
                    "dropped_queue": s.dropped_queue,
                    "dropped_gate": s.dropped_gate,
                    "undeliverable": s.undeliverable,
                    "lat_mean_ns": s.lat_mean_ns,
                    "lat_p50_ns": s.quantile_ns(0.50),
                    "lat_p95_ns": s.quantile_ns(0.95),
                    "lat_p99_ns": s.quantile_ns(0.99),
                    "lat_max_ns": s.lat_max or 0,
                }, sort_keys=True, separators=(",", ":")) + "\n")
