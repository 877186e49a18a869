"""Batch queue system: submission, node offline flags, dispatch, completion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

from .domain import Cluster, Job, JobState, PolicyViolation, PowerState, StateError, Vm
from .scheduler import PriorityEntry


@dataclass(frozen=True)
class NodeRecord:
    vm_id: str
    online: bool
    offline_flag: bool
    template_id: str
    free_cores: int


@dataclass(frozen=True)
class JobStart:
    job_id: str
    vm_id: str
    time_s: int


@dataclass(frozen=True)
class JobEnd:
    job_id: str
    vm_id: str
    time_s: int


class Lrms:
    """Node list and job lifecycle.

    ``on_job_start`` and ``on_job_end`` are notification hooks; the
    resource manager's mark-offline rule hangs off the first one and is
    applied before the next job in the same dispatch scan is placed.
    """

    def __init__(
        self,
        cluster: Cluster,
        on_job_start: Callable[[Vm, Job], None] | None = None,
        on_job_end: Callable[[Vm, Job], None] | None = None,
    ):
        self.cluster = cluster
        self.on_job_start = on_job_start
        self.on_job_end = on_job_end

    def submit(self, job: Job, at_s: int) -> Job:
        queue = self.cluster.queue(job.queue_name)
        if job.job_id in self.cluster.jobs:
            raise StateError(f"duplicate job id {job.job_id}")
        template = self.cluster.templates[queue.template_id]
        if not 1 <= job.cores <= template.cores:
            raise ValueError(
                f"job {job.job_id} asks for {job.cores} cores; VM type {template.template_id} has {template.cores}"
            )
        job.submit_time_s = at_s
        job.state = JobState.QUEUED
        self.cluster.jobs[job.job_id] = job
        return job

    def queued(self) -> Iterable[Job]:
        return (j for j in self.cluster.jobs.values() if j.state is JobState.QUEUED)

    def node(self, vm_id: str) -> NodeRecord:
        vm = self.cluster.vm(vm_id)
        return NodeRecord(vm.vm_id, vm.power is PowerState.ONLINE, vm.offline_flag, vm.template_id, vm.free_cores)

    def nodes(self) -> list[NodeRecord]:
        return [self.node(v) for v in sorted(self.cluster.vms)]

    def set_offline(self, vm_id: str) -> NodeRecord:
        vm = self.cluster.vm(vm_id)
        if vm.reserved:
            raise PolicyViolation(f"{vm_id} is a reserved node and can never be flagged offline")
        vm.offline_flag = True
        return self.node(vm_id)

    def clear_offline(self, vm_id: str) -> NodeRecord:
        vm = self.cluster.vm(vm_id)
        vm.offline_flag = False
        return self.node(vm_id)

    def has_open_vm(self) -> bool:
        """True if some VM could take a job right now."""
        return any(
            vm.power is PowerState.ONLINE and not vm.offline_flag and vm.free_cores > 0
            for vm in self.cluster.vms.values()
        )

    def dispatch(self, order: list[PriorityEntry], now_s: int) -> list[JobStart]:
        """Start queued jobs in priority order on eligible VMs.

        Eligible means Online, not flagged offline, same VM type as the
        job's queue and enough free cores. Among eligible VMs the one with
        the fewest free cores wins, then the lowest id.
        """
        by_template: dict[str, list[Vm]] = {}
        for vm in self.cluster.vms.values():
            if vm.power is PowerState.ONLINE and not vm.offline_flag and vm.free_cores > 0:
                by_template.setdefault(vm.template_id, []).append(vm)
        if not by_template:
            return []
        starts = []
        for entry in order:
            job = self.cluster.jobs[entry.job_id]
            if job.state is not JobState.QUEUED:
                continue
            candidates = by_template.get(self.cluster.queues[job.queue_name].template_id)
            if not candidates:
                continue
            best = None
            for vm in candidates:
                if vm.accepts(job.cores) and (
                    best is None or (vm.free_cores, vm.vm_id) < (best.free_cores, best.vm_id)
                ):
                    best = vm
            if best is None:
                continue
            starts.append(self._start(job, best, now_s))
        return starts

    def _start(self, job: Job, vm: Vm, now_s: int) -> JobStart:
        job.state = JobState.RUNNING
        job.start_time_s = now_s
        job.vm_id = vm.vm_id
        job.path = vm.provision_tag or "free"
        vm.provision_tag = None
        vm.running_job_ids.add(job.job_id)
        vm.free_cores -= job.cores
        vm.idle_since = None
        vm.last_used_s = now_s
        if self.on_job_start is not None:
            self.on_job_start(vm, job)
        return JobStart(job.job_id, vm.vm_id, now_s)

    def complete(self, job_id: str, at_s: int) -> JobEnd:
        job = self.cluster.job(job_id)
        if job.state is not JobState.RUNNING:
            raise StateError(f"job {job_id} is not running")
        vm = self.cluster.vm(job.vm_id)
        job.state = JobState.COMPLETED
        job.end_time_s = at_s
        vm.running_job_ids.discard(job_id)
        vm.free_cores += job.cores
        vm.last_used_s = at_s
        if not vm.running_job_ids:
            vm.idle_since = at_s
        if self.on_job_end is not None:
            self.on_job_end(vm, job)
        return JobEnd(job_id, vm.vm_id, at_s)
