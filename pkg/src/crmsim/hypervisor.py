"""Simulated virtualization backend.

Every operation is split into an initiation step, which validates the
request, debits resources and returns the completion time, and a
``finish_*`` step that the event loop calls at that time. A real backend
would implement the same :class:`HypervisorDriver` surface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

from .domain import (
    CapacityError,
    Cluster,
    PowerState,
    StateError,
    UnknownEntity,
    Vm,
    can_fit,
)


@dataclass(frozen=True)
class HypervisorConfig:
    boot_time_s: int = 60
    shutdown_time_s: int = 20
    clone_rate_s_per_gib: int = 30
    cold_migrate_time_s: int = 5

    def __post_init__(self):
        for name in ("boot_time_s", "shutdown_time_s", "clone_rate_s_per_gib", "cold_migrate_time_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class HypervisorDriver(Protocol):
    def power_on(self, vm_id: str, at_s: int, *, force: bool = False) -> int: ...
    def power_off(self, vm_id: str, at_s: int) -> int: ...
    def cold_migrate(self, vm_id: str, dest_host: str, at_s: int) -> int: ...
    def clone(self, template_id: str, at_s: int, host_id: str) -> tuple[str, int]: ...
    def destroy(self, vm_id: str, at_s: int) -> None: ...
    def vm(self, vm_id: str) -> Vm: ...


class SimHypervisor:
    def __init__(self, cluster: Cluster, cfg: HypervisorConfig | None = None):
        self.cluster = cluster
        self.cfg = cfg or HypervisorConfig()
        self._clone_seq = 0

    def vm(self, vm_id: str) -> Vm:
        return self.cluster.vm(vm_id)

    def power_on(self, vm_id: str, at_s: int, *, force: bool = False) -> int:
        """Start booting a powered-off VM on its current host.

        ``force`` skips the capacity check; it exists only for scripted
        overbooking injection.
        """
        vm = self.cluster.vm(vm_id)
        if vm.power is not PowerState.POWERED_OFF or vm.migrating_to is not None:
            raise StateError(f"power_on {vm_id}: vm is {vm.power.value}")
        if vm.host_id is None:
            raise StateError(f"power_on {vm_id}: vm has no host")
        host = self.cluster.host(vm.host_id)
        if not force:
            if not host.enabled:
                raise CapacityError(f"power_on {vm_id}: host {host.host_id} is disabled")
            if not can_fit(host, vm.alloc, needs_slot=True):
                raise CapacityError(f"power_on {vm_id}: host {host.host_id} would be overbooked")
        host.allocated = host.allocated + vm.alloc
        host.used_slots += 1
        vm.power = PowerState.BOOTING
        vm.offline_flag = not vm.reserved
        vm.pending_power_on = False
        return at_s + self.cfg.boot_time_s

    def finish_boot(self, vm_id: str, at_s: int) -> Vm:
        vm = self.cluster.vm(vm_id)
        if vm.power is not PowerState.BOOTING:
            raise StateError(f"boot completion for {vm_id} in state {vm.power.value}")
        vm.power = PowerState.ONLINE
        vm.powered_on_at = at_s
        vm.idle_since = at_s
        vm.last_used_s = at_s
        vm.free_cores = vm.alloc.cpu_cores
        return vm

    def power_off(self, vm_id: str, at_s: int) -> int:
        vm = self.cluster.vm(vm_id)
        if vm.power is not PowerState.ONLINE:
            raise StateError(f"power_off {vm_id}: vm is {vm.power.value}")
        if vm.running_job_ids:
            raise StateError(f"power_off {vm_id}: vm is running {sorted(vm.running_job_ids)}")
        vm.power = PowerState.SHUTTING_DOWN
        vm.offline_flag = not vm.reserved
        vm.idle_since = None
        return at_s + self.cfg.shutdown_time_s

    def finish_shutdown(self, vm_id: str, at_s: int) -> Vm:
        vm = self.cluster.vm(vm_id)
        if vm.power is not PowerState.SHUTTING_DOWN:
            raise StateError(f"shutdown completion for {vm_id} in state {vm.power.value}")
        host = self.cluster.host(vm.host_id)
        host.allocated = host.allocated - vm.alloc
        host.used_slots -= 1
        vm.power = PowerState.POWERED_OFF
        vm.powered_on_at = None
        vm.last_used_s = at_s
        vm.provision_tag = None
        return vm

    def cold_migrate(self, vm_id: str, dest_host: str, at_s: int) -> int:
        vm = self.cluster.vm(vm_id)
        if vm.power is not PowerState.POWERED_OFF:
            raise StateError(f"cold_migrate {vm_id}: only powered-off VMs can move (vm is {vm.power.value})")
        if vm.migrating_to is not None:
            raise StateError(f"cold_migrate {vm_id}: already migrating")
        dest = self.cluster.host(dest_host)
        if not dest.enabled or not can_fit(dest, vm.alloc, needs_slot=True):
            raise CapacityError(f"cold_migrate {vm_id}: {dest_host} cannot host it")
        vm.migrating_to = dest_host
        return at_s + self.cfg.cold_migrate_time_s

    def finish_migrate(self, vm_id: str, at_s: int) -> Vm:
        vm = self.cluster.vm(vm_id)
        dest = vm.migrating_to
        if dest is None:
            raise StateError(f"migration completion for {vm_id} with no migration in flight")
        if vm.host_id is not None:
            del self.cluster.hosts[vm.host_id].resident_vm_ids[vm_id]
        self.cluster.hosts[dest].resident_vm_ids[vm_id] = None
        vm.host_id = dest
        vm.migrating_to = None
        return vm

    def clone(self, template_id: str, at_s: int, host_id: str) -> tuple[str, int]:
        """Copy a template image into a new powered-off VM homed on ``host_id``."""
        try:
            template = self.cluster.templates[template_id]
        except KeyError:
            raise UnknownEntity(f"unknown template {template_id!r}") from None
        self.cluster.host(host_id)
        while True:
            self._clone_seq += 1
            vm_id = f"{template_id}-c{self._clone_seq:05d}"
            if vm_id not in self.cluster.vms:
                break
        vm = Vm(vm_id, template_id, host_id, template.alloc, power=PowerState.CLONING, last_used_s=at_s)
        self.cluster.add_vm(vm, template.image_size_gib)  # PoolFullError leaves state untouched
        return vm_id, at_s + template.image_size_gib * self.cfg.clone_rate_s_per_gib

    def finish_clone(self, vm_id: str, at_s: int) -> Vm:
        vm = self.cluster.vm(vm_id)
        if vm.power is not PowerState.CLONING:
            raise StateError(f"clone completion for {vm_id} in state {vm.power.value}")
        vm.power = PowerState.POWERED_OFF
        vm.last_used_s = at_s
        return vm

    def destroy(self, vm_id: str, at_s: int) -> None:
        vm = self.cluster.vm(vm_id)
        if vm.power is not PowerState.POWERED_OFF or vm.migrating_to is not None:
            raise StateError(f"destroy {vm_id}: vm is {vm.power.value}")
        self.cluster.pool.remove(vm_id)
        if vm.host_id is not None:
            del self.cluster.hosts[vm.host_id].resident_vm_ids[vm_id]
        del self.cluster.vms[vm_id]
