"""Simulated E2 nodes, RIC platform stubs, and xApp instances.

The xApp service model is a deterministic single-server FIFO with a bounded
queue (D/D/1/K): service time is exactly 1/capacity, arrivals at or below
capacity never drop, and at heavy overload the steady-state sojourn is the
full queue times the service time. Completions are deterministic once a
message is admitted, so the queue is evaluated in closed form at admission
time: no completion events, just exact integer arithmetic.

Traffic profiles emit indications at exact integer-nanosecond gaps derived
from the instantaneous rate, which makes generated message counts a pure
function of the profile and horizon.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from . import telemetry
from .errors import DuplicateRegistration, UnknownGnb, UnknownService
from .msgplane import MessageKind, ServiceIdentity
from .simcore import NS_PER_S, rate_to_gap_ns, s_to_ns

DEFAULT_CAPACITY_MSGS_PER_S = 600
DEFAULT_QUEUE_CAPACITY = 60
DEFAULT_STARTUP_DELAY_NS = s_to_ns(2.0)
DEFAULT_TEARDOWN_DELAY_NS = s_to_ns(1.0)

# Health evaluation defaults: windowed error fraction and mean latency caps.
DEFAULT_MAX_ERROR_FRACTION = 0.01
DEFAULT_MAX_MEAN_LATENCY_MS = 50.0


class E2NodeKind(enum.Enum):
    SIMULATED = "SIMULATED"
    EMULATED = "EMULATED"
    REAL_STUB = "REAL_STUB"


class XAppState(enum.Enum):
    STARTING = "STARTING"
    RUNNING = "RUNNING"
    DEGRADED = "DEGRADED"
    FAILED = "FAILED"
    TERMINATED = "TERMINATED"


class ProfileKind(enum.Enum):
    CONSTANT = "CONSTANT"
    BURST = "BURST"
    INCREMENTAL = "INCREMENTAL"


@dataclass(frozen=True)
class TrafficProfile:
    """Indication-rate schedule; rates in msg/s, durations in seconds."""

    kind: ProfileKind
    rate: float = 0.0            # CONSTANT
    base: float = 0.0            # BURST
    burst: float = 0.0
    pre_s: float = 0.0
    burst_s: float = 0.0
    post_s: float = 0.0
    start: float = 0.0           # INCREMENTAL
    end: float = 0.0
    step: float = 0.0            # msg/s added per second

    def __post_init__(self):
        if self.kind is ProfileKind.CONSTANT and self.rate <= 0:
            raise ValueError("CONSTANT profile needs rate > 0")
        if self.kind is ProfileKind.BURST and (self.base <= 0 or self.burst <= 0):
            raise ValueError("BURST profile needs base and burst rates > 0")
        if self.kind is ProfileKind.INCREMENTAL and (self.start <= 0 or self.end <= 0):
            raise ValueError("INCREMENTAL profile needs start and end rates > 0")

    @classmethod
    def constant(cls, rate):
        return cls(kind=ProfileKind.CONSTANT, rate=rate)

    @classmethod
    def burst_profile(cls, base, burst, pre_s, burst_s, post_s):
        return cls(kind=ProfileKind.BURST, base=base, burst=burst,
                   pre_s=pre_s, burst_s=burst_s, post_s=post_s)

    @classmethod
    def incremental(cls, start, end, step=1):
        return cls(kind=ProfileKind.INCREMENTAL, start=start, end=end, step=step)

    def segments(self, horizon_ns: int):
        """Piecewise-constant (start_ns, end_ns, gap_ns) segments within the horizon."""
        segs = []
        if self.kind is ProfileKind.CONSTANT:
            segs.append((0, horizon_ns, rate_to_gap_ns(_as_rate(self.rate))))
        elif self.kind is ProfileKind.BURST:
            b0 = s_to_ns(self.pre_s)
            b1 = b0 + s_to_ns(self.burst_s)
            b2 = b1 + s_to_ns(self.post_s)
            segs.append((0, min(b0, horizon_ns), rate_to_gap_ns(_as_rate(self.base))))
            if horizon_ns > b0:
                segs.append((b0, min(b1, horizon_ns), rate_to_gap_ns(_as_rate(self.burst))))
            if horizon_ns > b1:
                segs.append((b1, min(b2, horizon_ns), rate_to_gap_ns(_as_rate(self.base))))
        else:
            # one 1-second slot per rate step, clamped at the end rate
            t = 0
            rate = self.start
            while t < horizon_ns:
                seg_end = min(t + NS_PER_S, horizon_ns)
                segs.append((t, seg_end, rate_to_gap_ns(_as_rate(rate))))
                if rate >= self.end:
                    # hold the end rate for the rest of the horizon
                    if seg_end < horizon_ns:
                        segs[-1] = (t, horizon_ns, rate_to_gap_ns(_as_rate(rate)))
                    break
                rate = min(rate + self.step, self.end)
                t = seg_end
        return [(a, b, g) for a, b, g in segs if b > a]

    def total_count(self, horizon_ns: int) -> int:
        total = 0
        for start, end, gap in self.segments(horizon_ns):
            total += _arrivals_in(start, end, gap)
        return total


def _as_rate(value):
    iv = int(value)
    return iv if iv == value else float(value)


def _arrivals_in(start_ns, end_ns, gap_ns):
    if end_ns <= start_ns:
        return 0
    span = end_ns - start_ns
    return (span + gap_ns - 1) // gap_ns


@dataclass(frozen=True)
class E2NodeProfile:
    """Static description of one E2 node (gNB) traffic source."""

    gnb_id: str
    kind: E2NodeKind
    plmn: str
    profile: TrafficProfile
    dest_host: str = ""

    def __post_init__(self):
        if not self.dest_host:
            object.__setattr__(self, "dest_host", self.gnb_id)


class E2Node:
    """Runtime state of one E2 node: indication source and control sink."""

    def __init__(self, profile: E2NodeProfile):
        self.profile = profile
        self.gnb_id = profile.gnb_id
        self.controls_received = 0
        self.indications_sent = 0


class IndicationSource:
    """Schedules one node's indication stream; one event per message.

    The source self-schedules through its profile segments and stops when the
    simulation's ``sources_active`` flag is cleared (scenario quiesce) or the
    horizon is reached, so generated counts stay deterministic.
    """

    def __init__(self, sim, plane, node: E2Node, horizon_ns: int, flags):
        self.sim = sim
        self.plane = plane
        self.node = node
        self.horizon_ns = horizon_ns
        self.flags = flags
        self._segments = node.profile.profile.segments(horizon_ns)
        self._seg_idx = 0

    def start(self):
        if self._segments:
            first = self._segments[0][0]
            self.sim.schedule(first, self._fire, first)

    def _fire(self, t):
        if not self.flags.sources_active:
            return
        node = self.node
        node.indications_sent += 1
        self.plane.send_indication_fast(node.gnb_id, node.profile.dest_host, t)
        start, end, gap = self._segments[self._seg_idx]
        nxt = t + gap
        if nxt >= end:
            self._seg_idx += 1
            if self._seg_idx >= len(self._segments):
                return
            nxt = self._segments[self._seg_idx][0]
        self.sim.schedule(nxt, self._fire, nxt)


class E2ManagerStub:
    """E2 Manager API stub: gNB inventory and PLMN validation."""

    def __init__(self):
        self.nodes: dict = {}

    def add_node(self, node: E2Node):
        if node.gnb_id in self.nodes:
            raise DuplicateRegistration(f"gNB {node.gnb_id} already exists")
        self.nodes[node.gnb_id] = node

    def node(self, gnb_id: str) -> E2Node:
        try:
            return self.nodes[gnb_id]
        except KeyError:
            raise UnknownGnb(f"no E2 node with gnb_id {gnb_id!r}") from None

    def validate_plmn(self, gnb_id: str, plmn: str) -> bool:
        return self.node(gnb_id).profile.plmn == plmn


@dataclass(frozen=True)
class HealthProbe:
    """Probe configuration: cadence, failure budget, readiness vs liveness."""

    period_s: float = 0.5
    failure_threshold: int = 3
    kind: str = "READINESS"
    max_error_fraction: float = DEFAULT_MAX_ERROR_FRACTION
    max_mean_latency_ms: float = DEFAULT_MAX_MEAN_LATENCY_MS


PROBE_PASS = "PASS"
PROBE_FAIL = "FAIL"


class XAppInstance:
    """One versioned xApp workload with the bounded-queue service model."""

    __slots__ = (
        "identity", "capacity_msgs_per_s", "queue_capacity", "state",
        "service_time_ns", "server_free_at", "accepted", "dropped",
        "last_arrival", "metric_service", "ingress_acc", "egress_acc",
        "control_period_ns", "control_target", "probe", "probe_failures",
        "deployed_at", "started_at",
    )

    def __init__(self, identity: ServiceIdentity, store: telemetry.MetricsStore,
                 capacity_msgs_per_s=DEFAULT_CAPACITY_MSGS_PER_S,
                 queue_capacity=DEFAULT_QUEUE_CAPACITY,
                 control_period_ms: Optional[float] = None,
                 control_target: Optional[str] = None,
                 probe: HealthProbe = HealthProbe()):
        if capacity_msgs_per_s <= 0:
            raise ValueError("capacity must be positive")
        if queue_capacity <= 0:
            raise ValueError("queue capacity must be positive")
        self.identity = identity
        self.capacity_msgs_per_s = capacity_msgs_per_s
        self.queue_capacity = queue_capacity
        self.state = XAppState.STARTING
        self.service_time_ns = rate_to_gap_ns(_as_rate(capacity_msgs_per_s))
        self.server_free_at = 0
        self.accepted = 0
        self.dropped = 0
        self.last_arrival = {}
        self.metric_service = identity.metric_service
        self.ingress_acc = store.series(self.metric_service, identity.version, telemetry.INGRESS)
        self.egress_acc = store.series(self.metric_service, identity.version, telemetry.EGRESS)
        self.control_period_ns = None if control_period_ms is None else int(control_period_ms * 1_000_000)
        self.control_target = control_target
        self.probe = probe
        self.probe_failures = 0
        self.deployed_at = 0
        self.started_at = None

    # -- queue model -------------------------------------------------------

    def can_ingest(self) -> bool:
        return self.state is XAppState.RUNNING or self.state is XAppState.DEGRADED

    def backlog_at(self, t_ns: int) -> int:
        """Messages in system (queued + in service) at time t; exact integer."""
        gap = self.server_free_at - t_ns
        if gap <= 0:
            return 0
        st = self.service_time_ns
        return (gap + st - 1) // st

    def admit(self, arrival_ns: int) -> Optional[int]:
        """Admit one message arriving at ``arrival_ns``.

        Returns its completion (delivery) time, or None when the queue is
        full. FIFO single server: completion = max(arrival, server_free) +
        service_time; the whole trajectory is fixed at admission.
        """
        free = self.server_free_at
        st = self.service_time_ns
        if free > arrival_ns:
            if (free - arrival_ns + st - 1) // st >= self.queue_capacity:
                self.dropped += 1
                if self.state is XAppState.RUNNING:
                    self.state = XAppState.DEGRADED
                return None
            done = free + st
        else:
            done = arrival_ns + st
        self.server_free_at = done
        self.accepted += 1
        return done

    def ingest(self, env, arrival_ns: Optional[int] = None):
        """Envelope-facing admission; returns the delivery time or None (drop)."""
        if arrival_ns is None:
            arrival_ns = env.created_at + env.hop_total_ns
        return self.admit(arrival_ns)

    def queue_length_at(self, t_ns: int) -> int:
        return self.backlog_at(t_ns)

    def processed_by(self, t_ns: int) -> int:
        """Messages fully served by time t (completions are deterministic)."""
        return self.accepted - self.backlog_at(t_ns)


class ControlEmitter:
    """Periodic E2 control emission for one xApp instance."""

    def __init__(self, sim, plane, instance: XAppInstance, horizon_ns: int, flags):
        if instance.control_period_ns is None or not instance.control_target:
            raise ValueError("instance has no control emission configured")
        self.sim = sim
        self.plane = plane
        self.instance = instance
        self.horizon_ns = horizon_ns
        self.flags = flags

    def start(self, at_ns: int = 0):
        self.sim.schedule(at_ns, self._fire, at_ns)

    def _fire(self, t):
        inst = self.instance
        if not self.flags.sources_active or inst.state is XAppState.TERMINATED:
            return
        if inst.state in (XAppState.RUNNING, XAppState.DEGRADED):
            self.plane.send_control_fast(inst, inst.control_target, t)
        nxt = t + inst.control_period_ns
        if nxt < self.horizon_ns:
            self.sim.schedule(nxt, self._fire, nxt)


class XAppFleet:
    """Deploys, tracks, and tears down xApp instances (App Manager analog)."""

    def __init__(self, sim, plane, store,
                 startup_delay_ns=DEFAULT_STARTUP_DELAY_NS,
                 teardown_delay_ns=DEFAULT_TEARDOWN_DELAY_NS):
        self.sim = sim
        self.plane = plane
        self.store = store
        self.startup_delay_ns = startup_delay_ns
        self.teardown_delay_ns = teardown_delay_ns
        self._instances: dict = {}

    def instance_or_none(self, name: str, version: str) -> Optional[XAppInstance]:
        return self._instances.get((name, version))

    def instance(self, identity: ServiceIdentity) -> XAppInstance:
        inst = self._instances.get((identity.name, identity.version))
        if inst is None or inst.identity != identity:
            raise UnknownService(f"{identity.label} is not deployed")
        return inst

    def instances(self):
        return list(self._instances.values())

    def deploy(self, identity: ServiceIdentity, *, startup_delay_ns: Optional[int] = None,
               prewarmed: bool = False, **params) -> XAppInstance:
        """Create an instance; it serves once STARTING -> RUNNING completes.

        ``prewarmed`` models workloads that already exist when the simulation
        begins (the stable production version in rollout scenarios).
        """
        key = (identity.name, identity.version)
        if key in self._instances:
            raise DuplicateRegistration(f"{identity.label} is already deployed")
        inst = XAppInstance(identity, self.store, **params)
        inst.deployed_at = self.sim.now
        self._instances[key] = inst
        if prewarmed:
            inst.state = XAppState.RUNNING
            inst.started_at = self.sim.now
        else:
            delay = self.startup_delay_ns if startup_delay_ns is None else startup_delay_ns
            self.sim.schedule(self.sim.now + delay, self._mark_running, inst)
        return inst

    def _mark_running(self, inst: XAppInstance):
        if inst.state is XAppState.STARTING:
            inst.state = XAppState.RUNNING
            inst.started_at = self.sim.now

    def undeploy(self, identity: ServiceIdentity, *, teardown_delay_ns: Optional[int] = None):
        """Graceful removal: the instance keeps serving through the teardown
        delay, then terminates and loses its registration and subscriptions."""
        inst = self.instance(identity)
        delay = self.teardown_delay_ns if teardown_delay_ns is None else teardown_delay_ns
        self.sim.schedule(self.sim.now + delay, self._finish_teardown, inst)

    def _finish_teardown(self, inst: XAppInstance):
        inst.state = XAppState.TERMINATED
        self._instances.pop((inst.identity.name, inst.identity.version), None)
        if self.plane.registry.is_registered(inst.identity):
            self.plane.deregister(inst.identity)

    # -- health ------------------------------------------------------------

    def probe(self, inst: XAppInstance, window_ns: Optional[int] = None) -> str:
        """Point-in-time readiness probe driven by windowed telemetry."""
        if inst.state in (XAppState.TERMINATED, XAppState.FAILED, XAppState.STARTING):
            return PROBE_FAIL
        probe = inst.probe
        if window_ns is None:
            window_ns = s_to_ns(probe.period_s)
        t_to = self.sim.now
        t_from = max(0, t_to - window_ns)
        frac = self.store.error_fraction(inst.metric_service, inst.identity.version, t_from, t_to)
        if frac > probe.max_error_fraction:
            return PROBE_FAIL
        agg = self.store.window(inst.metric_service, inst.identity.version,
                                telemetry.INGRESS, t_from, t_to)
        if agg.delivered and agg.lat_mean_ns > probe.max_mean_latency_ms * 1_000_000:
            return PROBE_FAIL
        if inst.state is XAppState.DEGRADED and frac == 0:
            inst.state = XAppState.RUNNING
        return PROBE_PASS

    def probe_and_track(self, inst: XAppInstance, window_ns: Optional[int] = None) -> str:
        """Probe with consecutive-failure tracking; trips the instance to
        FAILED once the probe's failure_threshold is reached."""
        result = self.probe(inst, window_ns)
        if result == PROBE_FAIL:
            inst.probe_failures += 1
            if (inst.state not in (XAppState.TERMINATED,)
                    and inst.probe_failures >= inst.probe.failure_threshold):
                inst.state = XAppState.FAILED
        else:
            inst.probe_failures = 0
        return result
