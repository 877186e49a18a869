"""Deterministic discrete-event loop tying the cluster components together."""

from __future__ import annotations

import hashlib
import heapq
import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from ..crm import Action, ActionKind, iterate, on_job_start, release_pass, time_window_guard
from ..domain import (
    CapacityError,
    Cluster,
    CrmError,
    HostState,
    IntegrityError,
    Job,
    JobState,
    PowerState,
    StoragePool,
    Vm,
)
from ..hypervisor import SimHypervisor
from ..lrms import Lrms
from ..scheduler import PriorityEntry, UsageLedger, ordered_queue
from .metrics import JobRecord, Metrics
from .scenario import Scenario
from .workload import materialize


class EventKind(str, Enum):
    JOB_SUBMIT = "JobSubmit"
    SCHEDULER_TICK = "SchedulerTick"
    CRM_TICK = "CrmTick"
    BOOT_COMPLETE = "BootComplete"
    SHUTDOWN_COMPLETE = "ShutdownComplete"
    CLONE_COMPLETE = "CloneComplete"
    MIGRATE_COMPLETE = "MigrateComplete"
    JOB_START = "JobStart"
    JOB_END = "JobEnd"
    DIRECTIVE = "Directive"


# same-timestamp order: ticks, then completions, then external input
_RANK = {
    EventKind.SCHEDULER_TICK: 0,
    EventKind.CRM_TICK: 1,
    EventKind.BOOT_COMPLETE: 2,
    EventKind.SHUTDOWN_COMPLETE: 2,
    EventKind.CLONE_COMPLETE: 2,
    EventKind.MIGRATE_COMPLETE: 2,
    EventKind.JOB_END: 2,
    EventKind.DIRECTIVE: 3,
    EventKind.JOB_SUBMIT: 4,
    EventKind.JOB_START: 5,
}
_TICKS = (EventKind.SCHEDULER_TICK, EventKind.CRM_TICK)


@dataclass(frozen=True)
class Event:
    time_s: int
    seq: int
    kind: EventKind
    payload: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"time_s": self.time_s, "seq": self.seq, "kind": self.kind.value, "payload": self.payload},
            sort_keys=True,
            separators=(",", ":"),
        )


class EventLog(list):
    """Processed events in order; ``seq`` equals the line index."""

    def lines(self) -> list[str]:
        return [e.to_json() for e in self]

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def write(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    @classmethod
    def read(cls, path: str | Path) -> EventLog:
        out = cls()
        with Path(path).open() as fh:
            for line in fh:
                d = json.loads(line)
                out.append(Event(d["time_s"], d["seq"], EventKind(d["kind"]), d["payload"]))
        return out


def build_cluster(sc: Scenario) -> Cluster:
    cluster = Cluster(
        hosts={h.host_id: HostState(h) for h in sc.hosts},
        templates={t.template_id: t for t in sc.templates},
        queues={q.queue_name: q for q in sc.queues},
        pool=StoragePool(sc.pool_capacity_gib),
    )
    for spec in sc.vms:
        t = cluster.templates[spec.template_id]
        online = spec.power == "Online"
        vm = Vm(
            spec.vm_id,
            spec.template_id,
            spec.host_id,
            t.alloc,
            power=PowerState.ONLINE if online else PowerState.POWERED_OFF,
            offline_flag=spec.offline_flag,
            reserved=spec.reserved,
            managed=spec.managed,
            powered_on_at=0 if online else None,
            idle_since=0 if online else None,
        )
        cluster.add_vm(vm)
    for host in cluster.hosts.values():
        if host.overbooked:
            raise IntegrityError(f"initial state overbooks host {host.host_id}")
    return cluster


class Simulation:
    """One run of a scenario.

    ``observer`` is called after every processed event with the
    simulation and the logged event; property tests hang audits on it.
    ``audit`` recomputes all cached accounting after every event.
    """

    def __init__(
        self,
        scenario: Scenario,
        seed: int = 0,
        *,
        observer: Callable[[Simulation, Event], None] | None = None,
        audit: bool = False,
    ):
        self.scenario = scenario
        self.seed = seed
        self.cluster = build_cluster(scenario)
        self.hv = SimHypervisor(self.cluster, scenario.hypervisor)
        self.lrms = Lrms(self.cluster, on_job_start=self._on_job_start, on_job_end=self._on_job_end)
        self.usage = UsageLedger(scenario.scheduler.fairshare_halflife_s)
        self.observer = observer
        self.audit = audit
        self.log = EventLog()
        self.metrics = Metrics()
        self.now = 0
        self.injected_hosts: dict[str, int] = {}
        self._heap: list[tuple] = []
        self._counter = 0
        self._pending_other = 0
        self._active_jobs = 0
        self._start_notes: list[dict] = []
        self._order_version = 0
        self._order_cache: tuple | None = None

    # event queue -----------------------------------------------------------

    def _schedule(self, time_s: int, kind: EventKind, payload: dict) -> None:
        if time_s < self.now:
            raise IntegrityError(f"{kind.value} scheduled in the past ({time_s} < {self.now})")
        self._counter += 1
        heapq.heappush(self._heap, (time_s, _RANK[kind], self._counter, kind, payload))
        if kind not in _TICKS:
            self._pending_other += 1

    def _record(self, kind: EventKind, payload: dict) -> Event:
        ev = Event(self.now, len(self.log), kind, payload)
        self.log.append(ev)
        return ev

    # hooks -----------------------------------------------------------------

    def _on_job_start(self, vm: Vm, job: Job) -> None:
        action = on_job_start(vm, job, self.scenario.crm)
        note = {"job_id": job.job_id, "vm_id": vm.vm_id, "path": job.path}
        if action is not None:
            self.lrms.set_offline(vm.vm_id)
            self._count(action)
            note["crm"] = action.to_dict()
        self._start_notes.append(note)
        self._schedule(self.now + job.runtime_s, EventKind.JOB_END, {"job_id": job.job_id})

    def _on_job_end(self, vm: Vm, job: Job) -> None:
        self.usage.record_usage(job.group, job.cores * (job.end_time_s - job.start_time_s), self.now)
        self._order_version += 1

    def _count(self, action: Action) -> None:
        self.metrics.actions[(action.kind.value, action.tag)] += 1

    # passes ----------------------------------------------------------------

    def _order(self) -> list[PriorityEntry]:
        # Priorities depend only on the clock, the usage ledger and the job,
        # so within one timestamp a cached order stays valid as jobs leave
        # the queue; submissions and completions invalidate it.
        key = (self.now, self._order_version)
        if self._order_cache is not None and self._order_cache[0] == key:
            jobs = self.cluster.jobs
            return [e for e in self._order_cache[1] if jobs[e.job_id].state is JobState.QUEUED]
        order = ordered_queue(self.lrms.queued(), self.now, self.usage, self.scenario.scheduler, self.cluster.queues)
        self._order_cache = (key, order)
        return order

    def _dispatch(self, order: list[PriorityEntry]) -> int:
        starts = self.lrms.dispatch(order, self.now)
        notes, self._start_notes = self._start_notes, []
        for note in notes:
            self._record(EventKind.JOB_START, note)
        return len(starts)

    def _execute(self, action: Action) -> None:
        kind, now = action.kind, self.now
        vm = self.cluster.vms.get(action.vm_id) if action.vm_id else None
        if kind is ActionKind.CLEAR_OFFLINE:
            self.lrms.clear_offline(vm.vm_id)
            vm.provision_tag = vm.provision_tag or "offline"
        elif kind is ActionKind.SET_OFFLINE:
            self.lrms.set_offline(vm.vm_id)
        elif kind is ActionKind.MIGRATE:
            done = self.hv.cold_migrate(vm.vm_id, action.host_id, now)
            self._schedule(done, EventKind.MIGRATE_COMPLETE, {"vm_id": vm.vm_id, "host_id": action.host_id})
        elif kind is ActionKind.POWER_ON:
            vm.provision_tag = vm.provision_tag or "powered_on"
            if vm.migrating_to is not None:
                vm.pending_power_on = True
            else:
                self._power_on(vm)
        elif kind is ActionKind.CLONE:
            vm_id, done = self.hv.clone(action.template_id, now, action.host_id)
            self.cluster.vms[vm_id].provision_tag = "cloned"
            self._schedule(done, EventKind.CLONE_COMPLETE, {"vm_id": vm_id})
        elif kind is ActionKind.POWER_OFF:
            done = self.hv.power_off(vm.vm_id, now)
            self._schedule(done, EventKind.SHUTDOWN_COMPLETE, {"vm_id": vm.vm_id})
        elif kind is ActionKind.DESTROY:
            self.hv.destroy(vm.vm_id, now)
        self._count(action)

    def _power_on(self, vm: Vm, force: bool = False) -> None:
        done = self.hv.power_on(vm.vm_id, self.now, force=force)
        self._schedule(done, EventKind.BOOT_COMPLETE, {"vm_id": vm.vm_id})

    def _crm_tick(self) -> dict:
        cfg = self.scenario.crm
        order = self._order()
        guard = time_window_guard(self.cluster.vms.values(), self.now, cfg)
        for action in guard:
            self._execute(action)
        plan = iterate(self.cluster, order, self.now, cfg)
        releases = release_pass(self.cluster, order, self.now, cfg, plan)
        actions = guard + plan.actions + releases
        for action in plan.actions + releases:
            try:
                self._execute(action)
            except CrmError as exc:
                raise IntegrityError(f"t={self.now}: planned {action.to_dict()} failed: {exc}") from exc
        started = self._dispatch(order)
        return {
            "queued": len(order),
            "denied": len(plan.denied),
            "started": started,
            "actions": [a.to_dict() for a in actions],
        }

    def _sample_utilization(self) -> None:
        busy: Counter = Counter()
        for vm in self.cluster.vms.values():
            if vm.running_job_ids and vm.host_id is not None:
                busy[vm.host_id] += vm.alloc.cpu_cores - vm.free_cores
        for host in self.cluster.hosts.values():
            cap = host.spec.shareable
            self.metrics.utilization.append(
                (
                    self.now, host.host_id, host.allocated.cpu_cores, cap.cpu_cores, host.allocated.ram_mib,
                    cap.ram_mib, host.used_slots, host.spec.vm_slots, busy[host.host_id],
                )
            )

    def _directive(self, payload: dict) -> dict:
        kind = payload["kind"]
        host = self.cluster.host(payload["host_id"])
        if kind == "host_removal":
            host.enabled = False
        elif kind == "host_restore":
            host.enabled = True
        elif kind == "overbook":
            vm = self.cluster.vms.get(payload["vm_id"])
            if vm is None or vm.power is not PowerState.POWERED_OFF or vm.migrating_to is not None:
                return {**payload, "applied": False}
            if vm.host_id != host.host_id:
                if vm.host_id is not None:
                    del self.cluster.hosts[vm.host_id].resident_vm_ids[vm.vm_id]
                host.resident_vm_ids[vm.vm_id] = None
                vm.host_id = host.host_id
            self._power_on(vm, force=True)
            self.injected_hosts.setdefault(host.host_id, self.now)
        return {**payload, "applied": True}

    # main loop -------------------------------------------------------------

    def _handle(self, kind: EventKind, payload: dict) -> dict:
        cluster = self.cluster
        if kind is EventKind.SCHEDULER_TICK:
            self._sample_utilization()
            self._schedule(self.now + self.scenario.scheduler.tick_period_s, kind, {})
            order = self._order()
            return {"queued": len(order), "started": self._dispatch(order)}
        if kind is EventKind.CRM_TICK:
            self._schedule(self.now + self.scenario.crm.iteration_period_s, kind, {})
            return self._crm_tick()
        if kind is EventKind.JOB_SUBMIT:
            job = Job(
                payload["job_id"], payload["queue_name"], payload["user"],
                cluster.queue(payload["queue_name"]).group, payload["runtime_s"], self.now, payload["cores"],
            )
            self.lrms.submit(job, self.now)
            self._order_version += 1
            self._active_jobs += 1
            # ranking the queue is the costly part; skip it when nothing is open
            started = self._dispatch(self._order()) if self.lrms.has_open_vm() else 0
            return {**payload, "started": started}
        if kind is EventKind.JOB_END:
            job = cluster.job(payload["job_id"])
            end = self.lrms.complete(job.job_id, self.now)
            self._active_jobs -= 1
            return {"job_id": job.job_id, "vm_id": end.vm_id}
        if kind is EventKind.BOOT_COMPLETE:
            self.hv.finish_boot(payload["vm_id"], self.now)
        elif kind is EventKind.SHUTDOWN_COMPLETE:
            self.hv.finish_shutdown(payload["vm_id"], self.now)
        elif kind is EventKind.CLONE_COMPLETE:
            self.hv.finish_clone(payload["vm_id"], self.now)
        elif kind is EventKind.MIGRATE_COMPLETE:
            vm = self.hv.finish_migrate(payload["vm_id"], self.now)
            if vm.pending_power_on:
                try:
                    self._power_on(vm)
                except CapacityError as exc:
                    vm.pending_power_on = False
                    return {**payload, "power_on": "refused", "reason": str(exc)}
                return {**payload, "power_on": "started"}
        elif kind is EventKind.DIRECTIVE:
            return self._directive(payload)
        return payload

    def run(self) -> tuple[EventLog, Metrics]:
        sc = self.scenario
        self._schedule(0, EventKind.SCHEDULER_TICK, {})
        self._schedule(0, EventKind.CRM_TICK, {})
        for j in materialize(sc, self.seed):
            self._schedule(
                j.submit_time_s,
                EventKind.JOB_SUBMIT,
                {"job_id": j.job_id, "queue_name": j.queue_name, "user": j.user, "cores": j.cores, "runtime_s": j.runtime_s},
            )
        for d in sorted(sc.directives, key=lambda d: d.time_s):
            payload = {"kind": d.kind, "host_id": d.host_id}
            if d.vm_id is not None:
                payload["vm_id"] = d.vm_id
            self._schedule(d.time_s, EventKind.DIRECTIVE, payload)

        while self._heap:
            time_s, _, _, kind, payload = heapq.heappop(self._heap)
            if time_s > sc.horizon_s:
                break
            if kind not in _TICKS:
                self._pending_other -= 1
            self.now = time_s
            idx = len(self.log)
            self.log.append(None)
            out = self._handle(kind, payload)
            ev = Event(time_s, idx, kind, out)
            self.log[idx] = ev
            if self.audit:
                self.cluster.check_integrity()
            if self.observer is not None:
                self.observer(self, ev)
            if kind is EventKind.CRM_TICK and self._pending_other == 0 and self._active_jobs == 0:
                break
        self._finish()
        return self.log, self.metrics

    def _finish(self) -> None:
        m = self.metrics
        m.end_time_s = self.now
        usage: dict[str, int] = {g: 0 for g in self.scenario.groups}
        for job in self.cluster.jobs.values():
            m.jobs.append(
                JobRecord(
                    job.job_id, job.queue_name, job.group, job.user, job.cores, job.path,
                    job.submit_time_s, job.start_time_s, job.end_time_s,
                )
            )
            if job.start_time_s is not None:
                end = job.end_time_s if job.end_time_s is not None else self.now
                usage[job.group] = usage.get(job.group, 0) + job.cores * (end - job.start_time_s)
        m.group_core_seconds = usage


def run(scenario: Scenario, seed: int = 0, **kwargs) -> tuple[EventLog, Metrics]:
    """Run a scenario to quiescence or its horizon; deterministic in (scenario, seed)."""
    return Simulation(scenario, seed, **kwargs).run()


def conservation_holds(sim: Simulation) -> bool:
    states = Counter(j.state for j in sim.cluster.jobs.values())
    return states[JobState.QUEUED] + states[JobState.RUNNING] + states[JobState.COMPLETED] == len(sim.cluster.jobs)
