"""Core data model and resource-accounting arithmetic.

Units are fixed: CPU cores, RAM in MiB, scratch disk and images in GiB,
time in integer seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Iterator


class CrmError(Exception):
    """Base class for all errors raised by the package."""


class IntegrityError(CrmError):
    """Cached state disagrees with recomputation, or a reference dangles."""


class CapacityError(CrmError):
    """An operation would overbook a host."""


class StateError(CrmError):
    """An operation was requested in the wrong lifecycle state."""


class PolicyViolation(CrmError):
    """An operation is forbidden by node policy (e.g. reserved nodes)."""


class PoolFullError(CrmError):
    """The shared image pool cannot hold another image."""


class UnknownEntity(CrmError, KeyError):
    """A referenced host, VM, queue or job does not exist."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True, order=True)
class ResourceVector:
    cpu_cores: int = 0
    ram_mib: int = 0
    scratch_gib: int = 0

    def __post_init__(self):
        if self.cpu_cores < 0 or self.ram_mib < 0 or self.scratch_gib < 0:
            raise ValueError(f"negative resource component in {self!r}")

    def __add__(self, other: ResourceVector) -> ResourceVector:
        return ResourceVector(
            self.cpu_cores + other.cpu_cores,
            self.ram_mib + other.ram_mib,
            self.scratch_gib + other.scratch_gib,
        )

    def __sub__(self, other: ResourceVector) -> ResourceVector:
        # ValueError from __post_init__ if any component goes negative
        return ResourceVector(
            self.cpu_cores - other.cpu_cores,
            self.ram_mib - other.ram_mib,
            self.scratch_gib - other.scratch_gib,
        )

    def fits_within(self, other: ResourceVector) -> bool:
        """Componentwise ``self <= other``."""
        return (
            self.cpu_cores <= other.cpu_cores
            and self.ram_mib <= other.ram_mib
            and self.scratch_gib <= other.scratch_gib
        )

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.cpu_cores, self.ram_mib, self.scratch_gib)

    @classmethod
    def total(cls, vectors: Iterable[ResourceVector]) -> ResourceVector:
        c = r = s = 0
        for v in vectors:
            c += v.cpu_cores
            r += v.ram_mib
            s += v.scratch_gib
        return cls(c, r, s)


ZERO = ResourceVector()


@dataclass(frozen=True)
class HostSpec:
    host_id: str
    cpu_cores: int
    cpu_freq_mhz: int
    ram_total_mib: int
    ram_reserved_mib: int
    scratch_total_gib: int
    vm_slots: int

    def __post_init__(self):
        if self.cpu_cores < 1:
            raise ValueError(f"host {self.host_id}: cpu_cores must be >= 1")
        if self.vm_slots < 1:
            raise ValueError(f"host {self.host_id}: vm_slots must be >= 1")
        if not 0 <= self.ram_reserved_mib < self.ram_total_mib:
            raise ValueError(f"host {self.host_id}: ram_reserved_mib must be below ram_total_mib")
        if self.scratch_total_gib < 0 or self.cpu_freq_mhz < 0:
            raise ValueError(f"host {self.host_id}: negative capacity")

    @cached_property
    def shareable(self) -> ResourceVector:
        return ResourceVector(
            self.cpu_cores, self.ram_total_mib - self.ram_reserved_mib, self.scratch_total_gib
        )


class PowerState(str, Enum):
    POWERED_OFF = "PoweredOff"
    BOOTING = "Booting"
    ONLINE = "Online"
    SHUTTING_DOWN = "ShuttingDown"
    CLONING = "Cloning"

    @property
    def holds_host_resources(self) -> bool:
        return self in _POWERED


# Booting counts: a VM holds its slot and resources from power-on start
_POWERED = frozenset({PowerState.BOOTING, PowerState.ONLINE, PowerState.SHUTTING_DOWN})


@dataclass(frozen=True)
class VmTemplate:
    template_id: str
    image_size_gib: int
    cores: int
    ram_mib: int
    scratch_gib: int = 0

    def __post_init__(self):
        if self.image_size_gib < 1 or self.cores < 1 or self.ram_mib < 1:
            raise ValueError(f"template {self.template_id}: image, cores and ram must be >= 1")
        if self.scratch_gib < 0:
            raise ValueError(f"template {self.template_id}: negative scratch")

    @property
    def alloc(self) -> ResourceVector:
        return ResourceVector(self.cores, self.ram_mib, self.scratch_gib)


@dataclass
class Vm:
    """A virtual machine instance.

    Besides the lifecycle fields, the instance carries bookkeeping the
    resource manager needs to pick victims and grant capacity:
    ``idle_since`` (set while Online with no jobs), ``last_used_s`` (used
    for least-recently-used eviction), ``migrating_to`` and
    ``pending_power_on`` for a cold migration that precedes a boot, and
    ``provision_tag``, the path by which the VM was last made available.
    ``managed = False`` marks a VM outside the batch system: its resources
    count but the manager never touches it.
    """

    vm_id: str
    template_id: str
    host_id: str | None
    alloc: ResourceVector
    power: PowerState = PowerState.POWERED_OFF
    offline_flag: bool = True
    reserved: bool = False
    managed: bool = True
    free_cores: int = 0
    running_job_ids: set[str] = field(default_factory=set)
    powered_on_at: int | None = None
    idle_since: int | None = None
    last_used_s: int = 0
    migrating_to: str | None = None
    pending_power_on: bool = False
    provision_tag: str | None = None

    def __post_init__(self):
        if self.reserved:
            self.offline_flag = False
        if not self.running_job_ids:
            self.free_cores = self.alloc.cpu_cores

    @property
    def is_idle(self) -> bool:
        return self.power is PowerState.ONLINE and not self.running_job_ids

    def accepts(self, cores: int) -> bool:
        return self.power is PowerState.ONLINE and not self.offline_flag and self.free_cores >= cores


@dataclass(frozen=True)
class Queue:
    queue_name: str
    template_id: str
    group: str
    priority_weight: float = 0.0

    def __post_init__(self):
        if self.priority_weight < 0:
            raise ValueError(f"queue {self.queue_name}: priority_weight must be >= 0")


class JobState(str, Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    COMPLETED = "Completed"


@dataclass
class Job:
    job_id: str
    queue_name: str
    user: str
    group: str
    runtime_s: int
    submit_time_s: int
    cores: int = 1
    state: JobState = JobState.QUEUED
    start_time_s: int | None = None
    end_time_s: int | None = None
    vm_id: str | None = None
    path: str | None = None

    @property
    def queue_time_s(self) -> int | None:
        if self.start_time_s is None:
            return None
        return self.start_time_s - self.submit_time_s


@dataclass
class HostState:
    spec: HostSpec
    resident_vm_ids: dict[str, None] = field(default_factory=dict)  # ordered set
    allocated: ResourceVector = ZERO
    used_slots: int = 0
    enabled: bool = True

    @property
    def host_id(self) -> str:
        return self.spec.host_id

    @property
    def free(self) -> ResourceVector:
        """Unallocated shareable capacity, clamped at zero per component."""
        cap = self.spec.shareable
        a = self.allocated
        return ResourceVector(
            max(cap.cpu_cores - a.cpu_cores, 0),
            max(cap.ram_mib - a.ram_mib, 0),
            max(cap.scratch_gib - a.scratch_gib, 0),
        )

    @property
    def overbooked(self) -> bool:
        return not self.allocated.fits_within(self.spec.shareable) or self.used_slots > self.spec.vm_slots


def can_fit(host: HostState, demand: ResourceVector, needs_slot: bool = True) -> bool:
    if not (host.allocated + demand).fits_within(host.spec.shareable):
        return False
    return not needs_slot or host.used_slots < host.spec.vm_slots


def recompute_allocated(host: HostState, vms: dict[str, Vm]) -> ResourceVector:
    """Sum the allocations of the host's powered-on residents."""
    vecs = []
    for vm_id in host.resident_vm_ids:
        try:
            vm = vms[vm_id]
        except KeyError:
            raise IntegrityError(f"host {host.host_id} lists unknown vm {vm_id}") from None
        if vm.power.holds_host_resources:
            vecs.append(vm.alloc)
    return ResourceVector.total(vecs)


def recompute_slots(host: HostState, vms: dict[str, Vm]) -> int:
    return sum(1 for v in host.resident_vm_ids if vms[v].power.holds_host_resources)


@dataclass
class StoragePool:
    capacity_gib: int
    images: dict[str, int] = field(default_factory=dict)

    @property
    def used_gib(self) -> int:
        return sum(self.images.values())

    @property
    def free_gib(self) -> int:
        return self.capacity_gib - self.used_gib

    def add(self, vm_id: str, size_gib: int) -> None:
        if vm_id in self.images:
            raise IntegrityError(f"image for {vm_id} already in pool")
        if size_gib > self.free_gib:
            raise PoolFullError(
                f"pool has {self.free_gib} GiB free, image for {vm_id} needs {size_gib} GiB"
            )
        self.images[vm_id] = size_gib

    def remove(self, vm_id: str) -> int:
        try:
            return self.images.pop(vm_id)
        except KeyError:
            raise IntegrityError(f"no image for {vm_id} in pool") from None


@dataclass
class Cluster:
    """Mutable snapshot of every entity the resource manager reasons about."""

    hosts: dict[str, HostState]
    templates: dict[str, VmTemplate]
    queues: dict[str, Queue]
    pool: StoragePool
    vms: dict[str, Vm] = field(default_factory=dict)
    jobs: dict[str, Job] = field(default_factory=dict)

    def host(self, host_id: str) -> HostState:
        try:
            return self.hosts[host_id]
        except KeyError:
            raise UnknownEntity(f"unknown host {host_id!r}") from None

    def vm(self, vm_id: str) -> Vm:
        try:
            return self.vms[vm_id]
        except KeyError:
            raise UnknownEntity(f"unknown vm {vm_id!r}") from None

    def queue(self, name: str) -> Queue:
        try:
            return self.queues[name]
        except KeyError:
            raise UnknownEntity(f"unknown queue {name!r}") from None

    def job(self, job_id: str) -> Job:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownEntity(f"unknown job {job_id!r}") from None

    def template_of_job(self, job: Job) -> VmTemplate:
        return self.templates[self.queue(job.queue_name).template_id]

    def vms_on(self, host_id: str) -> Iterator[Vm]:
        for vm_id in self.hosts[host_id].resident_vm_ids:
            yield self.vms[vm_id]

    def add_vm(self, vm: Vm, image_size_gib: int | None = None) -> None:
        """Register a VM, its image and, if it is powered on, its resources."""
        if vm.vm_id in self.vms:
            raise IntegrityError(f"duplicate vm {vm.vm_id}")
        if vm.host_id is not None:
            host = self.host(vm.host_id)
        size = image_size_gib if image_size_gib is not None else self.templates[vm.template_id].image_size_gib
        self.pool.add(vm.vm_id, size)
        self.vms[vm.vm_id] = vm
        if vm.host_id is not None:
            host.resident_vm_ids[vm.vm_id] = None
            if vm.power.holds_host_resources:
                host.allocated = host.allocated + vm.alloc
                host.used_slots += 1

    def check_integrity(self) -> None:
        """Raise IntegrityError if any cached value disagrees with recomputation."""
        # one pass over the VMs; per host: cores, ram, scratch, slots, residents
        sums = {host_id: [0, 0, 0, 0, 0] for host_id in self.hosts}
        jobs = self.jobs
        for vm in self.vms.values():
            if vm.host_id is not None:
                if vm.vm_id not in self.hosts[vm.host_id].resident_vm_ids:
                    raise IntegrityError(f"vm {vm.vm_id} missing from host {vm.host_id}")
                row = sums[vm.host_id]
                row[4] += 1
                if vm.power.holds_host_resources:
                    row[0] += vm.alloc.cpu_cores
                    row[1] += vm.alloc.ram_mib
                    row[2] += vm.alloc.scratch_gib
                    row[3] += 1
            used = sum(jobs[j].cores for j in vm.running_job_ids) if vm.running_job_ids else 0
            if vm.free_cores != vm.alloc.cpu_cores - used:
                raise IntegrityError(f"vm {vm.vm_id}: free_cores {vm.free_cores} != {vm.alloc.cpu_cores - used}")
            if not 0 <= vm.free_cores <= vm.alloc.cpu_cores:
                raise IntegrityError(f"vm {vm.vm_id}: free_cores out of range")
            if vm.reserved and vm.offline_flag:
                raise IntegrityError(f"reserved vm {vm.vm_id} is flagged offline")
        for host in self.hosts.values():
            row = sums[host.host_id]
            if len(host.resident_vm_ids) != row[4]:
                # every VM pointing here is listed, so some listed one points elsewhere
                for vm_id in host.resident_vm_ids:
                    if vm_id not in self.vms:
                        raise IntegrityError(f"host {host.host_id} lists unknown vm {vm_id}")
                    if self.vms[vm_id].host_id != host.host_id:
                        raise IntegrityError(f"vm {vm_id} resident on {host.host_id} but points elsewhere")
            a = host.allocated
            if (a.cpu_cores, a.ram_mib, a.scratch_gib) != (row[0], row[1], row[2]):
                raise IntegrityError(f"host {host.host_id}: cached allocation drifted")
            if host.used_slots != row[3]:
                raise IntegrityError(f"host {host.host_id}: cached slot count drifted")
        if self.pool.images.keys() != self.vms.keys():
            raise IntegrityError("storage pool images do not match existing VMs")
        if self.pool.used_gib > self.pool.capacity_gib:
            raise IntegrityError("storage pool over capacity")
