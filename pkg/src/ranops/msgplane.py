"""Publish-subscribe message plane linking E2 nodes, platform stubs, and xApps.

The plane models routing, delay, and delivery; the wire protocol itself is
out of scope. Every indication hop goes through the mesh layer (version pick
plus proxy latency) and terminates in the destination xApp's bounded queue.
Drops are data, not exceptions: the plane maintains exact integer counters so
that sent == delivered + dropped_by_queue + dropped_by_gate + undeliverable
holds at every instant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from . import telemetry
from .errors import DuplicateRegistration, NoEligibleVersion, UnknownService

DEFAULT_NAMESPACE = "ricxapp"


class MessageKind(enum.Enum):
    E2_INDICATION = "E2_INDICATION"
    E2_CONTROL = "E2_CONTROL"
    SUBSCRIPTION_REQ = "SUBSCRIPTION_REQ"
    SUBSCRIPTION_RESP = "SUBSCRIPTION_RESP"
    HEALTH_PROBE = "HEALTH_PROBE"
    REGISTRATION = "REGISTRATION"


@dataclass(frozen=True)
class ServiceIdentity:
    """(name, version, namespace) triple identifying one deployed subset."""

    name: str
    version: str
    namespace: str = DEFAULT_NAMESPACE

    def __post_init__(self):
        if not self.version:
            raise ValueError("version must be non-empty")

    @property
    def label(self) -> str:
        return f"{self.namespace}/{self.name}:{self.version}"

    @property
    def metric_service(self) -> str:
        # The CSV schema has fixed service/version columns; non-default
        # namespaces (migration environments) are folded into the service cell.
        if self.namespace == DEFAULT_NAMESPACE:
            return self.name
        return f"{self.namespace}/{self.name}"


@dataclass
class MessageEnvelope:
    """One RIC-plane message with its timing metadata.

    ``hops`` carries (proxy_id, added_latency_ns) pairs when tracing is on;
    ``hop_total_ns`` is always maintained so the latency accounting identity
    delivered_at - created_at == hop_total + queueing/service holds exactly.
    """

    msg_id: int
    kind: MessageKind
    source: ServiceIdentity
    dest_host: str
    created_at: int
    payload_bytes: int = 256
    delivered_at: Optional[int] = None
    hop_total_ns: int = 0
    hops: list = field(default_factory=list)

    def add_hop(self, proxy_id: str, added_ns: int):
        self.hop_total_ns += added_ns
        self.hops.append((proxy_id, added_ns))


class Registry:
    """Platform registry of deployed service identities (App Manager analog)."""

    def __init__(self):
        self._records = {}

    def register(self, identity: ServiceIdentity, registered_at: int = 0):
        if identity in self._records:
            raise DuplicateRegistration(f"{identity.label} is already registered")
        self._records[identity] = registered_at
        return identity

    def deregister(self, identity: ServiceIdentity):
        if identity not in self._records:
            raise UnknownService(f"{identity.label} is not registered")
        del self._records[identity]

    def is_registered(self, identity: ServiceIdentity) -> bool:
        return identity in self._records

    def list_registered(self):
        return sorted(self._records, key=lambda i: (i.namespace, i.name, i.version))

    def versions_for(self, name: str):
        return sorted({i.version for i in self._records if i.name == name})


class SubscriptionTable:
    """Maps (kind, host) to the subscriber identities for that stream.

    ``generation`` bumps on every mutation so the mesh can cache its routing
    state and rebuild only when the topology actually changed.
    """

    def __init__(self, registry: Registry):
        self._registry = registry
        self._subs: dict = {}
        self.generation = 0

    def subscribe(self, identity: ServiceIdentity, kind: MessageKind, host: str):
        if not self._registry.is_registered(identity):
            raise UnknownService(f"{identity.label} must register before subscribing")
        subscribers = self._subs.setdefault((kind, host), [])
        if identity not in subscribers:
            subscribers.append(identity)
            self.generation += 1

    def unsubscribe(self, identity: ServiceIdentity, kind: MessageKind, host: str):
        subscribers = self._subs.get((kind, host), [])
        if identity in subscribers:
            subscribers.remove(identity)
            self.generation += 1

    def remove_service(self, identity: ServiceIdentity):
        changed = False
        for subscribers in self._subs.values():
            if identity in subscribers:
                subscribers.remove(identity)
                changed = True
        if changed:
            self.generation += 1

    def subscribers(self, kind: MessageKind, host: str):
        return list(self._subs.get((kind, host), []))


class PlaneStats:
    """Exact integer conservation counters for one simulation."""

    __slots__ = ("sent", "delivered", "dropped_queue", "dropped_gate", "undeliverable",
                 "hop_latency_sum", "hop_messages")

    def __init__(self):
        self.sent = 0
        self.delivered = 0
        self.dropped_queue = 0
        self.dropped_gate = 0
        self.undeliverable = 0
        # added mesh latency over all traversed messages (for mesh benchmarks)
        self.hop_latency_sum = 0
        self.hop_messages = 0

    def conserved(self) -> bool:
        return self.sent == (
            self.delivered + self.dropped_queue + self.dropped_gate + self.undeliverable
        )


class MessagePlane:
    """Routes envelopes between sources and subscribed services via the mesh.

    The hot path resolves a message's full fate at send time: the route pick
    and gate check use the policy state at the send instant (each message sees
    exactly one policy version), the mesh latency sample fixes the arrival
    time, and the destination's deterministic FIFO queue admits or drops it
    with the completion time computed in closed form. In-order delivery per
    (source, destination) pair is enforced by clamping arrival times to be
    non-decreasing per pair, with the wait folded into the last hop.
    """

    def __init__(self, sim, mesh, store: telemetry.MetricsStore):
        self.sim = sim
        self.mesh = mesh
        self.store = store
        self.registry = Registry()
        self.subscriptions = SubscriptionTable(self.registry)
        self.stats = PlaneStats()
        self.fleet = None          # wired by the simulation container
        self.e2nodes = {}          # gnb_id -> E2Node (control sinks)
        self._msg_seq = 0
        self.trace = None          # optional TraceBuffer
        self._latency_taps = {}    # (service, version) -> list for A/B stats

    # -- registration / subscription -------------------------------------

    def register(self, identity: ServiceIdentity):
        record = self.registry.register(identity, self.sim.now)
        return record

    def deregister(self, identity: ServiceIdentity):
        self.subscriptions.remove_service(identity)
        self.registry.deregister(identity)

    def list_registered(self):
        return self.registry.list_registered()

    def subscribe(self, identity: ServiceIdentity, kind: MessageKind, host: str):
        self.subscriptions.subscribe(identity, kind, host)

    # -- envelope API -----------------------------------------------------

    def next_msg_id(self) -> int:
        self._msg_seq += 1
        return self._msg_seq

    def make_envelope(self, kind, source, dest_host, payload_bytes=256) -> MessageEnvelope:
        return MessageEnvelope(
            msg_id=self.next_msg_id(),
            kind=kind,
            source=source,
            dest_host=dest_host,
            created_at=self.sim.now,
            payload_bytes=payload_bytes,
        )

    def send(self, env: MessageEnvelope):
        """Dispatch an envelope; the outcome lands in telemetry, never raises."""
        kind = env.kind
        if kind is MessageKind.E2_CONTROL:
            self._send_control_env(env)
        elif kind is MessageKind.E2_INDICATION:
            self._send_indication_env(env)
        else:
            self._send_direct_env(env)
        return env

    # -- indications ------------------------------------------------------

    def send_indication_fast(self, source_tag: str, host: str, created: int):
        """Allocation-light indication path used by traffic generators."""
        stats = self.stats
        stats.sent += 1
        picked = self.mesh.pick_version(MessageKind.E2_INDICATION, host)
        if picked is None:
            self.store.record_drop(host, telemetry.UNROUTED_VERSION, telemetry.INGRESS,
                                   created, telemetry.DROP_UNDELIVERABLE)
            stats.undeliverable += 1
            return
        instance = self.fleet.instance_or_none(host, picked)
        if instance is None or not instance.can_ingest():
            self.store.record_drop(host, picked, telemetry.INGRESS,
                                   created, telemetry.DROP_QUEUE)
            stats.dropped_queue += 1
            return
        added = self.mesh.sample_added_latency_fast()
        arrival = created + added
        last = instance.last_arrival.get(source_tag, 0)
        if arrival < last:
            arrival = last
        instance.last_arrival[source_tag] = arrival
        stats.hop_latency_sum += arrival - created
        stats.hop_messages += 1
        delivered_at = instance.admit(arrival)
        if delivered_at is None:
            self.store.record_drop(instance.metric_service, picked, telemetry.INGRESS,
                                   arrival, telemetry.DROP_QUEUE)
            stats.dropped_queue += 1
            if self.mesh.has_outlier_policies:
                self.mesh.note_outcome(host, picked, True)
            return
        latency = delivered_at - created
        instance.ingress_acc.add_delivery(delivered_at, latency)
        stats.delivered += 1
        if self.mesh.has_outlier_policies:
            self.mesh.note_outcome(host, picked, False)
        tap = self._latency_taps.get((instance.metric_service, picked))
        if tap is not None and len(tap) < 100_000:
            tap.append((delivered_at, latency))

    def _send_indication_env(self, env: MessageEnvelope):
        stats = self.stats
        stats.sent += 1
        host = env.dest_host
        created = env.created_at
        try:
            picked = self.mesh.route(env)
        except NoEligibleVersion:
            picked = None
        if picked is None:
            self.store.record_drop(host, telemetry.UNROUTED_VERSION, telemetry.INGRESS,
                                   created, telemetry.DROP_UNDELIVERABLE)
            stats.undeliverable += 1
            return
        instance = self.fleet.instance_or_none(host, picked)
        if instance is None or not instance.can_ingest():
            self.store.record_drop(host, picked, telemetry.INGRESS,
                                   created, telemetry.DROP_QUEUE)
            stats.dropped_queue += 1
            return
        self.mesh.traverse(env)
        source_tag = env.source.label
        arrival = created + env.hop_total_ns
        last = instance.last_arrival.get(source_tag, 0)
        if arrival < last:
            # in-order stream delivery: fold the hold-back into the last hop
            extra = last - arrival
            env.hop_total_ns += extra
            if env.hops:
                proxy, added = env.hops[-1]
                env.hops[-1] = (proxy, added + extra)
            arrival = last
        instance.last_arrival[source_tag] = arrival
        stats.hop_latency_sum += env.hop_total_ns
        stats.hop_messages += 1
        outcome = instance.ingest(env, arrival)
        if outcome is None:
            self.store.record_drop(instance.metric_service, picked, telemetry.INGRESS,
                                   arrival, telemetry.DROP_QUEUE)
            stats.dropped_queue += 1
            if self.mesh.has_outlier_policies:
                self.mesh.note_outcome(host, picked, True)
            if self.trace:
                self.trace.record(env, "dropped_queue")
            return
        env.delivered_at = outcome
        instance.ingress_acc.add_delivery(outcome, outcome - created)
        stats.delivered += 1
        if self.mesh.has_outlier_policies:
            self.mesh.note_outcome(host, picked, False)
        tap = self._latency_taps.get((instance.metric_service, picked))
        if tap is not None and len(tap) < 100_000:
            tap.append((outcome, outcome - created))
        if self.trace:
            self.trace.record(env, "delivered")

    # -- controls ---------------------------------------------------------

    def send_control_fast(self, instance, target_gnb: str, created: int):
        """Allocation-light E2 control path used by periodic emitters."""
        stats = self.stats
        stats.sent += 1
        service, version = instance.metric_service, instance.identity.version
        if not self.mesh.egress_open(instance.identity.name, version):
            instance.egress_acc.add_drop(created, telemetry.DROP_GATE)
            stats.dropped_gate += 1
            return
        node = self.e2nodes.get(target_gnb)
        if node is None:
            self.store.record_drop(target_gnb, telemetry.UNROUTED_VERSION, telemetry.INGRESS,
                                   created, telemetry.DROP_UNDELIVERABLE)
            stats.undeliverable += 1
            return
        added = self.mesh.sample_added_latency_fast()
        delivered = created + added
        stats.hop_latency_sum += added
        stats.hop_messages += 1
        node.controls_received += 1
        instance.egress_acc.add_delivery(delivered, added)
        stats.delivered += 1

    def _send_control_env(self, env: MessageEnvelope):
        stats = self.stats
        stats.sent += 1
        source = env.source
        if not self.mesh.egress_open(source.name, source.version):
            self.store.record_drop(source.metric_service, source.version, telemetry.EGRESS,
                                   env.created_at, telemetry.DROP_GATE)
            stats.dropped_gate += 1
            if self.trace:
                self.trace.record(env, "dropped_gate")
            return
        node = self.e2nodes.get(env.dest_host)
        if node is None:
            self.store.record_drop(env.dest_host, telemetry.UNROUTED_VERSION, telemetry.INGRESS,
                                   env.created_at, telemetry.DROP_UNDELIVERABLE)
            stats.undeliverable += 1
            return
        self.mesh.traverse(env)
        env.delivered_at = env.created_at + env.hop_total_ns
        stats.hop_latency_sum += env.hop_total_ns
        stats.hop_messages += 1
        node.controls_received += 1
        self.store.record_delivery(source.metric_service, source.version, telemetry.EGRESS,
                                   env.delivered_at, env.hop_total_ns)
        stats.delivered += 1
        if self.trace:
            self.trace.record(env, "delivered")

    # -- other message kinds ---------------------------------------------

    def _send_direct_env(self, env: MessageEnvelope):
        # Probe/registration/subscription traffic is routed like indications
        # but bypasses the destination queue (control-plane style delivery).
        stats = self.stats
        stats.sent += 1
        try:
            picked = self.mesh.route(env)
        except NoEligibleVersion:
            picked = None
        if picked is None:
            self.store.record_drop(env.dest_host, telemetry.UNROUTED_VERSION, telemetry.INGRESS,
                                   env.created_at, telemetry.DROP_UNDELIVERABLE)
            stats.undeliverable += 1
            return
        self.mesh.traverse(env)
        env.delivered_at = env.created_at + env.hop_total_ns
        stats.hop_latency_sum += env.hop_total_ns
        stats.hop_messages += 1
        target = ServiceIdentity(env.dest_host, picked)
        self.store.record_delivery(target.metric_service, picked, telemetry.INGRESS,
                                   env.delivered_at, env.hop_total_ns)
        stats.delivered += 1

    # -- A/B latency taps --------------------------------------------------

    def tap_latencies(self, service: str, version: str) -> list:
        """Retain (delivered_ns, latency_ns) pairs for one version, capped at 1e5."""
        tap = self._latency_taps.setdefault((service, version), [])
        return tap


class TraceBuffer:
    """Per-envelope trace retention, capped; exported as JSON lines."""

    def __init__(self, cap: int = 100_000):
        self.cap = cap
        self.rows = []

    def record(self, env: MessageEnvelope, outcome: str):
        if len(self.rows) >= self.cap:
            return
        self.rows.append({
            "msg_id": env.msg_id,
            "kind": env.kind.value,
            "source": env.source.label,
            "dest_host": env.dest_host,
            "created_ns": env.created_at,
            "delivered_ns": env.delivered_at,
            "outcome": outcome,
            "hops": [[p, n] for p, n in env.hops],
        })

    def export(self, path):
        import json
        with open(path, "w", newline="") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
