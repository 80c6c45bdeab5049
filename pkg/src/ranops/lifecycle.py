"""Lifecycle controller: pipeline templates and the executable testing flows.

Three production-testing flows run as event-driven state machines over the
workload, mesh, and telemetry layers: staged migration of an xApp across E2
node environments with approval gates, progressive canary rollout with
health-gated weight shifts and automatic rollback, and temporally multiplexed
A/B comparison where egress authority is handed between versions through
paired circuit-breaker flips. A fourth flow benchmarks platform CRUD
operation overhead across mesh architectures.

Every run keeps an append-only event log of (virtual time, transition,
detail); replays with the same seed and config produce identical logs.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, fields as dc_fields
from importlib import resources
from typing import Callable, Optional

import numpy as np
import yaml

from . import telemetry
from .errors import (
    MissingBinding,
    NotRollbackable,
    TypeMismatch,
    UnknownGnb,
    UnknownService,
)
from .mesh import MeshArchitecture, RouteSplitPolicy
from .msgplane import MessageKind, ServiceIdentity
from .simcore import NS_PER_S, s_to_ns
from .workloads import PROBE_PASS, XAppState

# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

_NO_DEFAULT = object()

_PLACEHOLDER_TYPES = {
    "int": int,
    "float": float,
    "str": str,
    "bool": bool,
    "list": list,
}


@dataclass(frozen=True)
class PlaceholderSpec:
    key: str
    type: str
    default: object = _NO_DEFAULT

    @property
    def required(self) -> bool:
        return self.default is _NO_DEFAULT


@dataclass(frozen=True)
class PipelineTemplate:
    """Parametrized workflow definition with {{key}} placeholders."""

    name: str
    placeholders: tuple
    steps: tuple

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineTemplate":
        placeholders = []
        for p in data.get("placeholders", []):
            placeholders.append(PlaceholderSpec(
                key=p["key"], type=p["type"],
                default=p.get("default", _NO_DEFAULT),
            ))
        return cls(
            name=data["name"],
            placeholders=tuple(placeholders),
            steps=tuple(data.get("steps", [])),
        )

    @classmethod
    def load(cls, path) -> "PipelineTemplate":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    @classmethod
    def builtin(cls, name: str) -> "PipelineTemplate":
        ref = resources.files("ranops").joinpath(f"templates/{name}.yaml")
        return cls.from_dict(yaml.safe_load(ref.read_text()))

    def placeholder(self, key: str) -> Optional[PlaceholderSpec]:
        for p in self.placeholders:
            if p.key == key:
                return p
        return None


def _check_type(spec: PlaceholderSpec, value):
    expected = _PLACEHOLDER_TYPES[spec.type]
    if expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise TypeMismatch(
            f"placeholder {spec.key!r} expects {spec.type}, got {type(value).__name__}: {value!r}"
        )
    return value


def bind_placeholders(template: PipelineTemplate, bindings: dict) -> dict:
    """Type-check bindings against the template and fill defaults."""
    bound = {}
    for spec in template.placeholders:
        if spec.key in bindings:
            bound[spec.key] = _check_type(spec, bindings[spec.key])
        elif spec.required:
            raise MissingBinding(f"template {template.name!r} requires {spec.key!r}")
        else:
            bound[spec.key] = spec.default
    unknown = set(bindings) - {p.key for p in template.placeholders}
    if unknown:
        raise TypeMismatch(
            f"template {template.name!r} has no placeholder(s) {sorted(unknown)}"
        )
    return bound


def _substitute(node, bound):
    if isinstance(node, str):
        if node.startswith("{{") and node.endswith("}}") and node.count("{{") == 1:
            key = node[2:-2].strip()
            return bound.get(key, node)
        out = node
        for key, value in bound.items():
            out = out.replace("{{" + key + "}}", str(value))
        return out
    if isinstance(node, dict):
        return {k: _substitute(v, bound) for k, v in node.items()}
    if isinstance(node, list):
        return [_substitute(v, bound) for v in node]
    return node


def instantiate(template: PipelineTemplate, bindings: dict):
    """Produce a concrete immutable plan from a template and bindings."""
    bound = bind_placeholders(template, bindings)
    steps = tuple(_substitute(list(template.steps), bound))
    builder = _PLAN_BUILDERS.get(template.name)
    if builder is None:
        return {"name": template.name, "values": bound, "steps": steps}
    return builder(bound, steps)


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutCriteria:
    max_error_fraction: float = 0.01
    max_mean_latency_ms: float = 50.0


@dataclass(frozen=True)
class RolloutPlan:
    """Progressive traffic shift from a stable to a candidate version."""

    host: str
    stable_version: str
    candidate_version: str
    step_pct: int = 5
    interval_s: float = 360.0
    criteria: RolloutCriteria = RolloutCriteria()
    rollback_on_failure: bool = True
    # explicit candidate-weight schedule (ascending, ending at 100); overrides step_pct
    steps_pct: Optional[tuple] = None
    namespace: str = "ricxapp"

    def __post_init__(self):
        if self.steps_pct is None:
            if not 0 < self.step_pct <= 100:
                raise ValueError("step_pct must be in (0, 100]")
        else:
            seq = tuple(self.steps_pct)
            if not seq or list(seq) != sorted(set(seq)) or seq[-1] != 100:
                raise ValueError("steps_pct must be strictly increasing and end at 100")
            if seq[0] <= 0:
                raise ValueError("steps_pct must be positive")
        if self.interval_s <= 0:
            raise ValueError("interval_s must be positive")

    def weight_schedule(self) -> tuple:
        """Candidate weights per step; the final step clamps to 100."""
        if self.steps_pct is not None:
            return tuple(self.steps_pct)
        weights = list(range(self.step_pct, 100, self.step_pct))
        weights.append(100)
        return tuple(weights)


@dataclass(frozen=True)
class MigrationPhase:
    gnb_id: str
    namespace: str
    phase_budget_s: float = 30.0


@dataclass(frozen=True)
class PhaseBudgets:
    """Sub-budgets of one automated migration phase (they sum to 5.6 s)."""

    plmn_check_s: float = 0.5
    startup_s: float = 2.0
    registration_s: float = 0.5
    subscription_s: float = 0.5
    health_verify_s: float = 2.0
    persist_s: float = 0.1

    @property
    def total_s(self) -> float:
        return (self.plmn_check_s + self.startup_s + self.registration_s
                + self.subscription_s + self.health_verify_s + self.persist_s)


@dataclass(frozen=True)
class MigrationPlan:
    """Staged promotion of one xApp across E2 node environments."""

    xapp_name: str
    xapp_version: str
    plmn: str
    phases: tuple  # of MigrationPhase
    approval: str = "AUTO"
    budgets: PhaseBudgets = PhaseBudgets()
    probe_period_s: float = 0.5

    def __post_init__(self):
        if not self.phases:
            raise ValueError("migration plan needs at least one phase")


class WinnerMetric(enum.Enum):
    MEAN_LATENCY = "MEAN_LATENCY"
    ERROR_RATE = "ERROR_RATE"
    THROUGHPUT = "THROUGHPUT"


@dataclass(frozen=True)
class ABPlan:
    """Temporally multiplexed comparison of two concurrent versions."""

    host: str
    version_a: str
    version_b: str
    duration_s: float = 600.0
    switchover_s: float = 300.0
    actuation_gap_s: float = 6.0
    winner_metric: WinnerMetric = WinnerMetric.MEAN_LATENCY
    namespace: str = "ricxapp"

    def __post_init__(self):
        if not 0 < self.switchover_s < self.duration_s:
            raise ValueError("switchover must fall inside the test duration")
        if self.actuation_gap_s < 0:
            raise ValueError("actuation gap must be non-negative")


def _build_canary(bound, steps):
    return RolloutPlan(
        host=bound["host"],
        stable_version=bound["stable_version"],
        candidate_version=bound["candidate_version"],
        step_pct=bound["step_pct"],
        interval_s=float(bound["interval_s"]),
        criteria=RolloutCriteria(
            max_error_fraction=float(bound["max_error_fraction"]),
            max_mean_latency_ms=float(bound["max_mean_latency_ms"]),
        ),
        rollback_on_failure=bound["rollback_on_failure"],
        steps_pct=tuple(bound["steps_pct"]) if bound["steps_pct"] else None,
    )


def _build_migration(bound, steps):
    phases = []
    namespaces = bound["namespaces"]
    for i, gnb in enumerate(bound["gnb_ids"]):
        ns = namespaces[i] if i < len(namespaces) else f"env{i}"
        phases.append(MigrationPhase(gnb_id=gnb, namespace=ns,
                                     phase_budget_s=float(bound["phase_budget_s"])))
    return MigrationPlan(
        xapp_name=bound["xapp_name"],
        xapp_version=bound["xapp_version"],
        plmn=bound["plmn"],
        phases=tuple(phases),
        approval=bound["approval"],
    )


def _build_ab(bound, steps):
    return ABPlan(
        host=bound["host"],
        version_a=bound["version_a"],
        version_b=bound["version_b"],
        duration_s=float(bound["duration_s"]),
        switchover_s=float(bound["switchover_s"]),
        actuation_gap_s=float(bound["actuation_gap_s"]),
        winner_metric=WinnerMetric(bound["winner_metric"]),
    )


_PLAN_BUILDERS = {
    "canary": _build_canary,
    "migration": _build_migration,
    "ab": _build_ab,
}


# ---------------------------------------------------------------------------
# Pipeline runs
# ---------------------------------------------------------------------------


class RunState(enum.Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    AWAITING_APPROVAL = "AWAITING_APPROVAL"
    SUCCEEDED = "SUCCEEDED"
    ROLLED_BACK = "ROLLED_BACK"
    FAILED = "FAILED"


_ALLOWED_TRANSITIONS = {
    RunState.PENDING: {RunState.RUNNING, RunState.FAILED},
    RunState.RUNNING: {RunState.AWAITING_APPROVAL, RunState.SUCCEEDED,
                       RunState.ROLLED_BACK, RunState.FAILED},
    RunState.AWAITING_APPROVAL: {RunState.RUNNING, RunState.FAILED},
    RunState.SUCCEEDED: set(),
    RunState.ROLLED_BACK: set(),
    RunState.FAILED: set(),
}

TERMINAL_STATES = {RunState.SUCCEEDED, RunState.ROLLED_BACK, RunState.FAILED}


class PipelineRun:
    """One pipeline execution: state machine plus append-only event log."""

    def __init__(self, run_id: str, plan, sim):
        self.run_id = run_id
        self.plan = plan
        self.sim = sim
        self.state = RunState.PENDING
        self.log: list = []
        self.result: dict = {}
        self._rollback_hook: Optional[Callable] = None
        self.log_event("state", {"state": self.state.value})

    @property
    def finished(self) -> bool:
        return self.state in TERMINAL_STATES

    def log_event(self, transition: str, detail: Optional[dict] = None):
        self.log.append((self.sim.now, transition, detail or {}))

    def transition(self, state: RunState, detail: Optional[dict] = None):
        if state not in _ALLOWED_TRANSITIONS[self.state]:
            raise RuntimeError(f"illegal transition {self.state.value} -> {state.value}")
        self.state = state
        info = {"state": state.value}
        if detail:
            info.update(detail)
        self.log_event("state", info)

    def events(self, transition: str):
        return [(t, d) for t, tr, d in self.log if tr == transition]

    def terminal_time_ns(self) -> Optional[int]:
        for t, tr, d in self.log:
            if tr == "state" and d.get("state") in {s.value for s in TERMINAL_STATES}:
                return t
        return None

    def export_log(self, path):
        with open(path, "w", newline="") as fh:
            for t, transition, detail in self.log:
                fh.write(json.dumps(
                    {"time_ns": t, "run_id": self.run_id,
                     "transition": transition, "detail": detail},
                    sort_keys=True, separators=(",", ":")) + "\n")


def rollback(run: PipelineRun):
    """Abort a running rollout: restore the pre-run split, drop the candidate."""
    if run._rollback_hook is None or run.state is not RunState.RUNNING:
        raise NotRollbackable(f"run {run.run_id} has no active candidate to roll back")
    run._rollback_hook("operator_requested")


# ---------------------------------------------------------------------------
# Approval sources
# ---------------------------------------------------------------------------


class AutoApproval:
    """Approves every gate; consumes no virtual time."""

    def decide(self, phase_index: int, run: PipelineRun) -> bool:
        return True


class FileApprovals:
    """Scripted yes/no answers for CI; exhausted answers reject."""

    def __init__(self, answers):
        self.answers = list(answers)
        self._next = 0

    def decide(self, phase_index: int, run: PipelineRun) -> bool:
        if self._next >= len(self.answers):
            return False
        answer = self.answers[self._next]
        self._next += 1
        return bool(answer)


class InteractiveApproval:
    """Terminal prompt; virtual time is suspended while waiting. EOF rejects."""

    def __init__(self, input_fn=input):
        self._input = input_fn

    def decide(self, phase_index: int, run: PipelineRun) -> bool:
        try:
            answer = self._input(f"approve phase {phase_index + 1} [y/N] ")
        except EOFError:
            return False
        return answer.strip().lower() in ("y", "yes")


# ---------------------------------------------------------------------------
# Canary rollout
# ---------------------------------------------------------------------------


class CanaryRunner:
    """Health-gated progressive rollout with automatic rollback."""

    def __init__(self, ctx, plan: RolloutPlan, run_id: str = "canary"):
        self.ctx = ctx
        self.plan = plan
        self.run = PipelineRun(run_id, plan, ctx.sim)
        self.stable = ServiceIdentity(plan.host, plan.stable_version, plan.namespace)
        self.candidate = ServiceIdentity(plan.host, plan.candidate_version, plan.namespace)
        self.schedule = plan.weight_schedule()
        self._step = 0
        self._interval_ns = s_to_ns(plan.interval_s)
        self._pre_run_split = None
        self.run._rollback_hook = self._rollback

    def start(self):
        ctx = self.ctx
        self.run.transition(RunState.RUNNING)
        stable_inst = ctx.fleet.instance_or_none(self.plan.host, self.plan.stable_version)
        if stable_inst is None:
            raise UnknownService(f"stable version {self.stable.label} is not deployed")
        self._pre_run_split = ctx.mesh.active_split(self.plan.host)
        candidate_inst = ctx.fleet.instance_or_none(self.plan.host, self.plan.candidate_version)
        if candidate_inst is None:
            inst = ctx.fleet.deploy(self.candidate)
            ctx.plane.register(self.candidate)
            ctx.plane.subscribe(self.candidate, MessageKind.E2_INDICATION, self.plan.host)
            ctx.mesh.apply_route_split(RouteSplitPolicy(
                self.plan.host, ((self.plan.stable_version, 100),
                                 (self.plan.candidate_version, 0))))
            self.run.log_event("candidate_deployed", {"version": self.plan.candidate_version})
            ready_at = ctx.sim.now + ctx.fleet.startup_delay_ns
            ctx.sim.schedule(ready_at, self._apply_step)
        else:
            self._apply_step()
        return self.run

    def _apply_step(self):
        ctx = self.ctx
        weight = self.schedule[self._step]
        policy = RouteSplitPolicy(self.plan.host, (
            (self.plan.stable_version, 100 - weight),
            (self.plan.candidate_version, weight),
        ))
        effective_at = ctx.mesh.apply_route_split(policy)
        self.run.log_event("weight_applied", {
            "host": self.plan.host,
            "stable_pct": 100 - weight,
            "candidate_pct": weight,
            "effective_at_ns": effective_at,
        })
        ctx.sim.schedule(ctx.sim.now + self._interval_ns, self._evaluate)

    def _evaluate(self):
        ctx = self.ctx
        now = ctx.sim.now
        window = (now - self._interval_ns, now)
        service = self.candidate.metric_service
        version = self.plan.candidate_version
        frac = ctx.store.error_fraction(service, version, *window)
        agg = ctx.store.window(service, version, telemetry.INGRESS, *window)
        mean_ms = agg.lat_mean_ns / 1e6
        crit = self.plan.criteria
        healthy = (frac <= crit.max_error_fraction
                   and (agg.delivered == 0 or mean_ms <= crit.max_mean_latency_ms))
        self.run.log_event("health_evaluated", {
            "candidate_pct": self.schedule[self._step],
            "error_fraction": round(frac, 6),
            "mean_latency_ms": round(mean_ms, 6),
            "delivered": agg.delivered,
            "healthy": healthy,
        })
        if not healthy and self.plan.rollback_on_failure:
            self._rollback("health_criteria_failed")
            return
        if not healthy:
            self.run.log_event("health_failure_ignored", {
                "candidate_pct": self.schedule[self._step]})
        if self._step + 1 >= len(self.schedule):
            self._succeed()
        else:
            self._step += 1
            self._apply_step()

    def _rollback(self, reason: str):
        ctx = self.ctx
        restore = self._pre_run_split or RouteSplitPolicy(
            self.plan.host, ((self.plan.stable_version, 100),))
        ctx.mesh.apply_route_split(restore)
        ctx.fleet.undeploy(self.candidate)
        self.run.log_event("rolled_back", {
            "reason": reason,
            "restored_split": list(restore.splits),
        })
        self.run.transition(RunState.ROLLED_BACK, {"reason": reason})

    def _succeed(self):
        ctx = self.ctx
        ctx.fleet.undeploy(self.stable)
        self.run.log_event("stable_decommissioned", {"version": self.plan.stable_version})
        self.run.transition(RunState.SUCCEEDED, {
            "candidate": self.plan.candidate_version,
            "steps": len(self.schedule),
        })


def run_canary(ctx, plan: RolloutPlan, run_id: str = "canary") -> PipelineRun:
    """Start the canary flow; the caller drives the event loop to completion."""
    runner = CanaryRunner(ctx, plan, run_id)
    return runner.start()


# ---------------------------------------------------------------------------
# Migration across E2 environments
# ---------------------------------------------------------------------------


class MigrationRunner:
    """Phase-by-phase promotion with budgets, probes, and approval gates."""

    def __init__(self, ctx, plan: MigrationPlan, approvals, run_id: str = "migration"):
        self.ctx = ctx
        self.plan = plan
        self.approvals = approvals
        self.run = PipelineRun(run_id, plan, ctx.sim)
        for phase in plan.phases:
            ctx.e2mgr.node(phase.gnb_id)  # raises UnknownGnb before any deploy
        self.phase_times_s: list = []
        self._identity: Optional[ServiceIdentity] = None
        self._deployed = False

    def start(self):
        self.run.transition(RunState.RUNNING)
        self._phase_start(0)
        return self.run

    def _phase_identity(self, index: int) -> ServiceIdentity:
        phase = self.plan.phases[index]
        return ServiceIdentity(self.plan.xapp_name, self.plan.xapp_version, phase.namespace)

    def _phase_start(self, index: int):
        ctx = self.ctx
        phase = self.plan.phases[index]
        self._phase_t0 = ctx.sim.now
        self._deployed = False
        self._identity = self._phase_identity(index)
        self.run.log_event("phase_started", {
            "phase": index, "gnb_id": phase.gnb_id,
            "environment": phase.namespace,
            "e2_kind": ctx.e2mgr.node(phase.gnb_id).profile.kind.value,
        })
        ctx.sim.schedule(ctx.sim.now + s_to_ns(self.plan.budgets.plmn_check_s),
                         self._plmn_checked, index)

    def _plmn_checked(self, index: int):
        ctx = self.ctx
        phase = self.plan.phases[index]
        if not ctx.e2mgr.validate_plmn(phase.gnb_id, self.plan.plmn):
            self.run.log_event("plmn_mismatch", {
                "phase": index, "gnb_id": phase.gnb_id, "expected": self.plan.plmn,
                "actual": ctx.e2mgr.node(phase.gnb_id).profile.plmn,
            })
            self._fail(index, "plmn_validation_failed")
            return
        self.run.log_event("plmn_validated", {"phase": index, "plmn": self.plan.plmn})
        ctx.fleet.deploy(self._identity,
                         startup_delay_ns=s_to_ns(self.plan.budgets.startup_s))
        self._deployed = True
        ctx.sim.schedule(ctx.sim.now + s_to_ns(self.plan.budgets.startup_s),
                         self._deployed_step, index)

    def _deployed_step(self, index: int):
        self.run.log_event("xapp_deployed", {"phase": index, "identity": self._identity.label})
        self.ctx.sim.schedule(self.ctx.sim.now + s_to_ns(self.plan.budgets.registration_s),
                              self._registered, index)

    def _registered(self, index: int):
        self.ctx.plane.register(self._identity)
        self.run.log_event("xapp_registered", {"phase": index})
        self.ctx.sim.schedule(self.ctx.sim.now + s_to_ns(self.plan.budgets.subscription_s),
                              self._subscribed, index)

    def _subscribed(self, index: int):
        ctx = self.ctx
        phase = self.plan.phases[index]
        host = ctx.e2mgr.node(phase.gnb_id).profile.dest_host
        ctx.plane.subscribe(self._identity, MessageKind.E2_INDICATION, host)
        self.run.log_event("subscribed", {"phase": index, "host": host})
        self._probe_streak = 0
        self._probes_needed = max(
            1, round(self.plan.budgets.health_verify_s / self.plan.probe_period_s))
        ctx.sim.schedule(ctx.sim.now + s_to_ns(self.plan.probe_period_s),
                         self._probe, index)

    def _probe(self, index: int):
        ctx = self.ctx
        phase = self.plan.phases[index]
        inst = ctx.fleet.instance(self._identity)
        result = ctx.fleet.probe(inst, window_ns=s_to_ns(self.plan.probe_period_s))
        if result == PROBE_PASS:
            self._probe_streak += 1
            if self._probe_streak >= self._probes_needed:
                self.run.log_event("health_verified", {
                    "phase": index, "probes": self._probes_needed})
                ctx.sim.schedule(ctx.sim.now + s_to_ns(self.plan.budgets.persist_s),
                                 self._persisted, index)
                return
        else:
            self._probe_streak = 0
            if ctx.sim.now - self._phase_t0 > s_to_ns(phase.phase_budget_s):
                self._fail(index, "phase_timeout")
                return
        ctx.sim.schedule(ctx.sim.now + s_to_ns(self.plan.probe_period_s),
                         self._probe, index)

    def _persisted(self, index: int):
        ctx = self.ctx
        phase = self.plan.phases[index]
        automated_s = (ctx.sim.now - self._phase_t0) / NS_PER_S
        self.phase_times_s.append(automated_s)
        inst = ctx.fleet.instance(self._identity)
        self.run.log_event("phase_completed", {
            "phase": index,
            "gnb_id": phase.gnb_id,
            "automated_s": round(automated_s, 9),
            "indications_delivered": sum(inst.ingress_acc.delivered.values()),
        })
        self.run.transition(RunState.AWAITING_APPROVAL, {"phase": index})
        # The gate consumes wall time only; the virtual clock does not move,
        # so approval latency never contaminates the automated-time metrics.
        approved = self.approvals.decide(index, self.run)
        if not approved:
            self.run.log_event("approval_rejected", {"phase": index})
            self.run.transition(RunState.RUNNING, {"phase": index, "approved": False})
            self._fail(index, "approval_rejected")
            return
        self.run.transition(RunState.RUNNING, {"phase": index, "approved": True})
        if index + 1 < len(self.plan.phases):
            # old environment tears down concurrently with the next phase
            ctx.fleet.undeploy(self._identity)
            self.run.log_event("phase_teardown_scheduled", {"phase": index})
            self._phase_start(index + 1)
        else:
            total = sum(self.phase_times_s)
            self.run.result["phase_times_s"] = [round(x, 9) for x in self.phase_times_s]
            self.run.result["total_automated_s"] = round(total, 9)
            self.run.transition(RunState.SUCCEEDED, {
                "phases": len(self.plan.phases),
                "total_automated_s": round(total, 9),
            })

    def _fail(self, index: int, reason: str):
        ctx = self.ctx
        if self._deployed and ctx.fleet.instance_or_none(
                self._identity.name, self._identity.version) is not None:
            ctx.fleet.undeploy(self._identity, teardown_delay_ns=0)
        self.run.log_event("cleanup", {"phase": index})
        self.run.transition(RunState.FAILED, {"phase": index, "reason": reason})


def run_migration(ctx, plan: MigrationPlan, approvals=None,
                  run_id: str = "migration") -> PipelineRun:
    if approvals is None:
        approvals = AutoApproval()
    runner = MigrationRunner(ctx, plan, approvals, run_id)
    run = runner.start()
    run.result.setdefault("phase_times_s", runner.phase_times_s)
    return run


# ---------------------------------------------------------------------------
# A/B test with temporal multiplexing
# ---------------------------------------------------------------------------


class ABRunner:
    """Concurrent version comparison; egress authority held by one at a time."""

    def __init__(self, ctx, plan: ABPlan, run_id: str = "ab"):
        self.ctx = ctx
        self.plan = plan
        self.run = PipelineRun(run_id, plan, ctx.sim)
        self.ident_a = ServiceIdentity(plan.host, plan.version_a, plan.namespace)
        self.ident_b = ServiceIdentity(plan.host, plan.version_b, plan.namespace)

    def start(self):
        ctx, plan = self.ctx, self.plan
        self.run.transition(RunState.RUNNING)
        for ident in (self.ident_a, self.ident_b):
            if ctx.fleet.instance_or_none(ident.name, ident.version) is None:
                raise UnknownService(f"{ident.label} is not deployed")
        self._t0 = ctx.sim.now
        # tap per-message latencies for the statistical comparison
        svc = self.ident_a.metric_service
        self._tap_a = ctx.plane.tap_latencies(svc, plan.version_a)
        self._tap_b = ctx.plane.tap_latencies(svc, plan.version_b)
        close_at = self._t0 + s_to_ns(plan.switchover_s)
        ctx.mesh.schedule_exclusive_handover(
            plan.host, plan.version_a, plan.version_b,
            close_at=close_at, gap_ns=s_to_ns(plan.actuation_gap_s))
        self.run.log_event("handover_scheduled", {
            "close_a_at_ns": close_at,
            "open_b_at_ns": close_at + s_to_ns(plan.actuation_gap_s),
        })
        ctx.sim.schedule(self._t0 + s_to_ns(plan.duration_s), self._finish)
        return self.run

    def _window_metrics(self, version: str, t_from: int, t_to: int) -> dict:
        ctx = self.ctx
        service = ServiceIdentity(self.plan.host, version, self.plan.namespace).metric_service
        agg = ctx.store.window(service, version, telemetry.INGRESS, t_from, t_to)
        span_s = (t_to - t_from) / NS_PER_S
        return {
            "window_ns": [t_from, t_to],
            "delivered": agg.delivered,
            "errors": agg.dropped_queue,
            "error_fraction": round(ctx.store.error_fraction(service, version, t_from, t_to), 6),
            "mean_latency_ms": round(agg.lat_mean_ns / 1e6, 6),
            "throughput_msg_s": round(agg.delivered / span_s, 6) if span_s else 0.0,
        }

    def _better(self, metrics_a: dict, metrics_b: dict) -> str:
        metric = self.plan.winner_metric
        if metric is WinnerMetric.MEAN_LATENCY:
            ka, kb = metrics_a["mean_latency_ms"], metrics_b["mean_latency_ms"]
            if ka != kb:
                return self.plan.version_a if ka < kb else self.plan.version_b
        elif metric is WinnerMetric.ERROR_RATE:
            ka, kb = metrics_a["error_fraction"], metrics_b["error_fraction"]
            if ka != kb:
                return self.plan.version_a if ka < kb else self.plan.version_b
        else:
            ka, kb = metrics_a["throughput_msg_s"], metrics_b["throughput_msg_s"]
            if ka != kb:
                return self.plan.version_a if ka > kb else self.plan.version_b
        if metrics_a["errors"] != metrics_b["errors"]:
            return (self.plan.version_a if metrics_a["errors"] < metrics_b["errors"]
                    else self.plan.version_b)
        return self.plan.version_a

    def _finish(self):
        ctx, plan = self.ctx, self.plan
        t0 = self._t0
        a_window = (t0, t0 + s_to_ns(plan.switchover_s))
        b_window = (t0 + s_to_ns(plan.switchover_s + plan.actuation_gap_s),
                    t0 + s_to_ns(plan.duration_s))
        metrics_a = self._window_metrics(plan.version_a, *a_window)
        metrics_b = self._window_metrics(plan.version_b, *b_window)
        winner = self._better(metrics_a, metrics_b)
        loser = plan.version_b if winner == plan.version_a else plan.version_a
        lat_a = [lat for t, lat in self._tap_a if a_window[0] <= t < a_window[1]]
        lat_b = [lat for t, lat in self._tap_b if b_window[0] <= t < b_window[1]]
        diff_ci = bootstrap_mean_diff_ci(
            lat_a, lat_b, ctx.sim.random.substream("bootstrap"))
        verdict = {
            "winner": winner,
            "loser": loser,
            "metric": plan.winner_metric.value,
            "a": metrics_a,
            "b": metrics_b,
            "latency_mean_diff_ns": diff_ci[0],
            "latency_diff_ci95_ns": [diff_ci[1], diff_ci[2]],
        }
        self.run.result["verdict"] = verdict
        self.run.log_event("verdict", verdict)
        # winner takes the full ingress split and regains egress authority
        ctx.mesh.apply_route_split(RouteSplitPolicy(plan.host, ((winner, 100),)))
        if not ctx.mesh.egress_open(plan.host, winner):
            ctx.mesh.gate_egress(plan.host, winner, True)
        loser_ident = self.ident_b if loser == plan.version_b else self.ident_a
        ctx.fleet.undeploy(loser_ident)
        self.run.log_event("loser_decommissioned", {"version": loser})
        self.run.transition(RunState.SUCCEEDED, {"winner": winner})


def run_ab(ctx, plan: ABPlan, run_id: str = "ab") -> PipelineRun:
    runner = ABRunner(ctx, plan, run_id)
    return runner.start()


def bootstrap_mean_diff_ci(samples_a, samples_b, rng_stream,
                           resamples: int = 1000, alpha: float = 0.05):
    """Two-sample bootstrap of mean(B) - mean(A); seeded and deterministic.

    Returns (point_diff, ci_low, ci_high) in the samples' units; degenerate
    inputs (either side empty) give (0, 0, 0).
    """
    if not samples_a or not samples_b:
        return (0.0, 0.0, 0.0)
    gen = rng_stream.generator
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    point = float(b.mean() - a.mean())
    idx_a = gen.integers(0, len(a), size=(resamples, len(a)))
    idx_b = gen.integers(0, len(b), size=(resamples, len(b)))
    diffs = b[idx_b].mean(axis=1) - a[idx_a].mean(axis=1)
    lo, hi = np.quantile(diffs, [alpha / 2, 1 - alpha / 2])
    return (point, float(lo), float(hi))


# ---------------------------------------------------------------------------
# CRUD benchmark
# ---------------------------------------------------------------------------

CRUD_OPS = ("create", "update", "delete")

# Baseline platform operation durations (ns) with no mesh installed.
CRUD_BASE_NS = {
    "create": 7_300_000_000,
    "update": 20_200_000_000,
    "delete": 10_300_000_000,
}

# Per-architecture config cost added to every operation. The node-proxy data
# plane measures slightly faster than bare platform operations, hence the
# negative entry; all deltas keep every mean within 10% of the baseline.
CRUD_MODE_COST_NS = {
    MeshArchitecture.NO_MESH: 0,
    MeshArchitecture.SIDECAR: 500_000_000,
    MeshArchitecture.NODE_PROXY: -400_000_000,
    MeshArchitecture.IN_KERNEL: 300_000_000,
}

CRUD_SAMPLE_JITTER = 0.02


@dataclass
class CrudBenchResult:
    repetitions: int
    samples: dict = field(default_factory=dict)   # (mode, op) -> [ns, ...]
    means_ns: dict = field(default_factory=dict)  # (mode, op) -> float
    overhead: dict = field(default_factory=dict)  # (mode, op) -> fraction vs baseline

    def table_rows(self):
        rows = []
        for mode in sorted({m for m, _ in self.means_ns}, key=lambda m: m.value):
            for op in CRUD_OPS:
                rows.append({
                    "mode": mode.value,
                    "op": op,
                    "mean_ns": round(self.means_ns[(mode, op)], 6),
                    "overhead_vs_no_mesh": round(self.overhead[(mode, op)], 6),
                })
        return rows


def run_crud_bench(modes, repetitions: int, rng_stream) -> CrudBenchResult:
    """Create/update/delete duration model across mesh architectures.

    Durations are modeled constants plus a small seeded jitter per sample;
    the benchmark exercises the overhead contract (every mean within 10% of
    the no-mesh baseline), not platform emergent behavior.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    result = CrudBenchResult(repetitions=repetitions)
    for mode in modes:
        cost = CRUD_MODE_COST_NS[mode]
        for op in CRUD_OPS:
            stream = rng_stream.substream(f"crud/{mode.value}/{op}")
            base = CRUD_BASE_NS[op] + cost
            samples = []
            for _ in range(repetitions):
                u = stream.uniform()
                samples.append(int(base * (1 - CRUD_SAMPLE_JITTER + 2 * CRUD_SAMPLE_JITTER * u)))
            result.samples[(mode, op)] = samples
            mean = sum(samples) / repetitions
            result.means_ns[(mode, op)] = mean
            result.overhead[(mode, op)] = mean / CRUD_BASE_NS[op] - 1.0
    return result
