"""Cluster resource manager: provisioning and release planners.

Both planners read a :class:`~crmsim.domain.Cluster` snapshot and return
actions without mutating it; the event loop executes the actions.

Provisioning walks the scheduler's order and, for each queued job, fires
the first applicable rule:

* R1 clear the offline flag of a suitable running VM,
* R2 power on a suitable powered-off VM, optionally migrating it first to
  the fastest host that can take it,
* R3 clone a new VM from the template.

Capacity claimed earlier in the walk is unavailable to later jobs. Jobs
already covered by capacity in flight (booting or cloning VMs, or free
cores on VMs open to the batch system) get no action.

The release pass then powers off idle VMs that block a denied job of a
different type, destroys powered-off images when the pool blocked a
clone, keeps configured headroom free, and powers off the first idle VM
on any overbooked host.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

from .domain import (
    ZERO,
    Cluster,
    HostState,
    Job,
    JobState,
    PowerState,
    ResourceVector,
    Vm,
    can_fit,
)
from .scheduler import PriorityEntry


class ActionKind(str, Enum):
    CLEAR_OFFLINE = "ClearOffline"
    SET_OFFLINE = "SetOffline"
    MIGRATE = "Migrate"
    POWER_ON = "PowerOn"
    CLONE = "Clone"
    POWER_OFF = "PowerOff"
    DESTROY = "Destroy"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    vm_id: str | None = None
    host_id: str | None = None
    template_id: str | None = None
    job_id: str | None = None
    tag: str = "provide"

    def to_dict(self) -> dict:
        d = {"action": self.kind.value, "tag": self.tag}
        for name in ("vm_id", "host_id", "template_id", "job_id"):
            value = getattr(self, name)
            if value is not None:
                d[name] = value
        return d


@dataclass(frozen=True)
class CrmConfig:
    iteration_period_s: int = 30
    migrate_before_start: bool = True
    headroom: ResourceVector = ZERO
    pool_headroom_gib: int = 0
    time_window_s: int | None = None
    multicore_keep_online: bool = True
    min_instances_per_template: int = 0

    def __post_init__(self):
        if self.iteration_period_s < 1:
            raise ValueError("iteration_period_s must be >= 1")
        if self.pool_headroom_gib < 0 or self.min_instances_per_template < 0:
            raise ValueError("pool_headroom_gib and min_instances_per_template must be >= 0")
        if self.time_window_s is not None and self.time_window_s < 0:
            raise ValueError("time_window_s must be >= 0")


@dataclass(frozen=True, slots=True)
class Denial:
    """A queued job the provisioning walk could not serve.

    ``victims`` are idle VMs to power off (capacity) or powered-off VMs to
    destroy (pool) so that the denial is lifted on a later iteration.
    """

    job_id: str
    template_id: str
    reasons: frozenset[str]
    host_id: str | None = None
    victims: tuple[str, ...] = ()
    evictions: tuple[str, ...] = ()


def _vec(v: ResourceVector) -> list[int]:
    return [v.cpu_cores, v.ram_mib, v.scratch_gib]


class PlanLedger:
    """Per-host and pool accounting for one planning pass.

    ``now`` tracks what is allocated or claimed for immediate actions.
    ``future`` additionally subtracts resources that are on their way out
    (VMs shutting down, selected victims) and adds capacity reserved for
    denied jobs; it is only used to decide how many victims to pick.
    """

    def __init__(self, cluster: Cluster):
        self.cluster = cluster
        self.cap: dict[str, list[int]] = {}
        self.now: dict[str, list[int]] = {}
        self.future: dict[str, list[int]] = {}
        for host_id, host in cluster.hosts.items():
            self.cap[host_id] = _vec(host.spec.shareable) + [host.spec.vm_slots]
            self.now[host_id] = _vec(host.allocated) + [host.used_slots]
            self.future[host_id] = list(self.now[host_id])
        self.pool_now = cluster.pool.used_gib
        self.pool_future = self.pool_now
        self.granted: set[str] = set()
        self.held: set[str] = set()
        self.evicted: set[str] = set()
        self.supply: dict[str, list[list]] = {}
        for vm in cluster.vms.values():
            if vm.migrating_to is not None and vm.pending_power_on:
                self._add(self.now, vm.migrating_to, vm.alloc)
                self._add(self.future, vm.migrating_to, vm.alloc)
            elif vm.power is PowerState.SHUTTING_DOWN:
                self._add(self.future, vm.host_id, vm.alloc, -1)

    @staticmethod
    def _add(table: dict[str, list[int]], host_id: str, alloc: ResourceVector, sign: int = 1) -> None:
        row = table[host_id]
        row[0] += sign * alloc.cpu_cores
        row[1] += sign * alloc.ram_mib
        row[2] += sign * alloc.scratch_gib
        row[3] += sign

    def _fits(self, table: dict[str, list[int]], host: HostState, alloc: ResourceVector) -> bool:
        if not host.enabled:
            return False
        used = table[host.host_id]
        cap = self.cap[host.host_id]
        return (
            used[0] + alloc.cpu_cores <= cap[0]
            and used[1] + alloc.ram_mib <= cap[1]
            and used[2] + alloc.scratch_gib <= cap[2]
            and used[3] + 1 <= cap[3]
        )

    def fits_now(self, host: HostState, alloc: ResourceVector) -> bool:
        return self._fits(self.now, host, alloc)

    def fits_future(self, host: HostState, alloc: ResourceVector) -> bool:
        return self._fits(self.future, host, alloc)

    def claim(self, host_id: str, alloc: ResourceVector) -> None:
        self._add(self.now, host_id, alloc)
        self._add(self.future, host_id, alloc)

    def release(self, vm: Vm) -> None:
        """Account for a victim that will be powered off."""
        self.held.add(vm.vm_id)
        self._add(self.future, vm.host_id, vm.alloc, -1)

    def reserve(self, host_id: str, alloc: ResourceVector) -> None:
        self._add(self.future, host_id, alloc)

    def pool_free_now(self) -> int:
        return self.cluster.pool.capacity_gib - self.pool_now

    def pool_free_future(self) -> int:
        return self.cluster.pool.capacity_gib - self.pool_future

    def free_after_plan(self) -> list[int]:
        """Cluster-wide free capacity once planned power-offs complete."""
        total = [0, 0, 0]
        for host_id, host in self.cluster.hosts.items():
            if not host.enabled:
                continue
            cap, now = self.cap[host_id], self.now[host_id]
            released = [0, 0, 0]
            for vm_id in self.held:
                vm = self.cluster.vms[vm_id]
                if vm.host_id == host_id:
                    released[0] += vm.alloc.cpu_cores
                    released[1] += vm.alloc.ram_mib
                    released[2] += vm.alloc.scratch_gib
            for i in range(3):
                total[i] += max(cap[i] - now[i] + released[i], 0)
        return total

    def add_supply(self, template_id: str, key: str, cores: int) -> None:
        if cores > 0:
            self.supply.setdefault(template_id, []).append([key, cores])

    def cover(self, template_id: str, cores: int) -> str | None:
        """Consume in-flight capacity for a job; return the covering key."""
        for item in self.supply.get(template_id, ()):
            if item[1] >= cores:
                item[1] -= cores
                return item[0]
        return None


@dataclass
class ActionPlan:
    actions: list[Action] = field(default_factory=list)
    denied: list[Denial] = field(default_factory=list)
    ledger: PlanLedger | None = field(default=None, repr=False)

    def __iter__(self):
        return iter(self.actions)

    def __len__(self):
        return len(self.actions)

    def kinds(self) -> list[ActionKind]:
        return [a.kind for a in self.actions]


def place(
    alloc: ResourceVector,
    hosts: Iterable[HostState],
    fits: Callable[[HostState, ResourceVector], bool] | None = None,
) -> str | None:
    """Fastest feasible host by nominal CPU frequency, lowest id on ties."""
    best = None
    for host in hosts:
        if fits is None:
            ok = host.enabled and can_fit(host, alloc, needs_slot=True)
        else:
            ok = fits(host, alloc)
        if not ok:
            continue
        if best is None or host.spec.cpu_freq_mhz > best.spec.cpu_freq_mhz or (
            host.spec.cpu_freq_mhz == best.spec.cpu_freq_mhz and host.host_id < best.host_id
        ):
            best = host
    return None if best is None else best.host_id


def window_expired(vm: Vm, now_s: int, cfg: CrmConfig) -> bool:
    return (
        cfg.time_window_s is not None
        and vm.powered_on_at is not None
        and now_s - vm.powered_on_at >= cfg.time_window_s
    )


def on_job_start(vm: Vm, job: Job, cfg: CrmConfig) -> Action | None:
    """Mark a VM offline once a job lands on it, except where policy keeps it open."""
    if vm.reserved or not vm.managed:
        return None
    if vm.alloc.cpu_cores > 1 and cfg.multicore_keep_online:
        return None
    if vm.offline_flag:
        return None
    return Action(ActionKind.SET_OFFLINE, vm_id=vm.vm_id, job_id=job.job_id, tag="job_start")


def time_window_guard(vms: Iterable[Vm], now_s: int, cfg: CrmConfig) -> list[Action]:
    if cfg.time_window_s is None:
        return []
    out = []
    for vm in sorted(vms, key=lambda v: v.vm_id):
        if (
            vm.managed
            and not vm.reserved
            and vm.power is PowerState.ONLINE
            and not vm.offline_flag
            and window_expired(vm, now_s, cfg)
        ):
            out.append(Action(ActionKind.SET_OFFLINE, vm_id=vm.vm_id, tag="time_window"))
    return out


def _idle_victims(
    vms: Iterable[Vm],
    ledger: PlanLedger,
    exclude_template: str | None = None,
    keep: Callable[[Vm], bool] | None = None,
) -> list[Vm]:
    out = [
        vm
        for vm in vms
        if vm.is_idle
        and vm.managed
        and not vm.reserved
        and (vm.template_id != exclude_template or (keep is not None and not keep(vm)))
        and vm.vm_id not in ledger.granted
        and vm.vm_id not in ledger.held
    ]
    out.sort(key=lambda v: (v.idle_since if v.idle_since is not None else 0, v.vm_id))
    return out


def _destroy_candidates(cluster: Cluster, ledger: PlanLedger, cfg: CrmConfig, exclude_template: str | None) -> list[Vm]:
    out = [
        vm
        for vm in cluster.vms.values()
        if vm.power is PowerState.POWERED_OFF
        and vm.managed
        and not vm.reserved
        and vm.migrating_to is None
        and not vm.pending_power_on
        and vm.template_id != exclude_template
        and vm.vm_id not in ledger.granted
        and vm.vm_id not in ledger.evicted
    ]
    out.sort(key=lambda v: (v.last_used_s, v.vm_id))
    return out


def _pick_evictions(cluster: Cluster, ledger: PlanLedger, cfg: CrmConfig, need_gib: int, exclude_template: str | None) -> list[Vm]:
    counts: dict[str, int] = {}
    for vm in cluster.vms.values():
        if vm.vm_id not in ledger.evicted:
            counts[vm.template_id] = counts.get(vm.template_id, 0) + 1
    picked = []
    freed = 0
    for vm in _destroy_candidates(cluster, ledger, cfg, exclude_template):
        if ledger.pool_free_future() + freed >= need_gib:
            break
        if counts[vm.template_id] - 1 < cfg.min_instances_per_template:
            continue
        counts[vm.template_id] -= 1
        picked.append(vm)
        freed += cluster.pool.images[vm.vm_id]
    if ledger.pool_free_future() + freed < need_gib:
        return []
    return picked


def _pick_pool_victims(
    cluster: Cluster,
    ledger: PlanLedger,
    cfg: CrmConfig,
    need_gib: int,
    template_id: str,
    keep: Callable[[Vm], bool],
) -> list[Vm]:
    """Idle VMs to power off so their images can be destroyed next iteration."""
    counts: dict[str, int] = {}
    for vm in cluster.vms.values():
        if vm.vm_id not in ledger.evicted:
            counts[vm.template_id] = counts.get(vm.template_id, 0) + 1
    picked = []
    freed = 0
    for vm in _idle_victims(cluster.vms.values(), ledger, template_id, keep):
        if ledger.pool_free_future() + freed >= need_gib:
            break
        if counts[vm.template_id] - 1 < cfg.min_instances_per_template:
            continue
        counts[vm.template_id] -= 1
        picked.append(vm)
        freed += cluster.pool.images[vm.vm_id]
    if ledger.pool_free_future() + freed < need_gib:
        return []
    return picked


def _pick_victims(
    cluster: Cluster,
    ledger: PlanLedger,
    alloc: ResourceVector,
    template_id: str,
    keep: Callable[[Vm], bool],
) -> tuple[str | None, list[Vm]]:
    """Fewest idle VMs on one host whose shutdown lets ``alloc`` fit.

    Same-type VMs are skipped unless ``keep`` rejects them (a VM whose
    submission window has expired is worth power-cycling for its own type).
    """
    best: tuple | None = None
    for host in cluster.hosts.values():
        if not host.enabled:
            continue
        row = ledger.future[host.host_id]
        saved = list(row)
        chosen: list[Vm] = []
        fits = ledger.fits_future(host, alloc)
        if not fits:
            for vm in _idle_victims(cluster.vms_on(host.host_id), ledger, template_id, keep):
                chosen.append(vm)
                ledger._add(ledger.future, host.host_id, vm.alloc, -1)
                if ledger.fits_future(host, alloc):
                    fits = True
                    break
        ledger.future[host.host_id] = saved
        if not fits:
            continue
        key = (len(chosen), -host.spec.cpu_freq_mhz, host.host_id)
        if best is None or key < best[0]:
            best = (key, host.host_id, chosen)
    if best is None:
        return None, []
    return best[1], best[2]


def iterate(
    cluster: Cluster,
    order: Sequence[PriorityEntry],
    now_s: int,
    cfg: CrmConfig,
) -> ActionPlan:
    """Plan provisioning actions for the queued jobs in scheduler order."""
    ledger = PlanLedger(cluster)
    plan = ActionPlan(ledger=ledger)
    overbooked = {h.host_id for h in cluster.hosts.values() if h.overbooked}

    r1: dict[str, list[Vm]] = {}
    r2: dict[str, list[Vm]] = {}
    for vm in sorted(cluster.vms.values(), key=lambda v: v.vm_id):
        if not vm.managed:
            continue
        if vm.power is PowerState.ONLINE:
            if window_expired(vm, now_s, cfg) or vm.host_id in overbooked:
                continue
            if vm.offline_flag:
                r1.setdefault(vm.template_id, []).append(vm)
            else:
                ledger.add_supply(vm.template_id, vm.vm_id, vm.free_cores)
        elif vm.power in (PowerState.BOOTING, PowerState.CLONING) or vm.pending_power_on:
            ledger.add_supply(vm.template_id, vm.vm_id, vm.alloc.cpu_cores)
        elif vm.power is PowerState.POWERED_OFF and vm.migrating_to is None:
            r2.setdefault(vm.template_id, []).append(vm)

    hosts = list(cluster.hosts.values())
    no_room: set[ResourceVector] = set()
    no_victims: set[tuple[str, ResourceVector]] = set()
    # (template, cores) keys for which nothing at all could be done this walk
    hopeless: dict[tuple[str, int], frozenset[str]] = {}
    clone_seq = 0

    def forget(tid: str) -> None:
        for k in [k for k in hopeless if k[0] == tid]:
            del hopeless[k]

    def keep(vm: Vm) -> bool:
        # same-type VMs are only worth power-cycling once their window expired
        return not window_expired(vm, now_s, cfg)

    templates = {q.queue_name: cluster.templates[q.template_id] for q in cluster.queues.values()}
    allocs = {t.template_id: t.alloc for t in cluster.templates.values()}

    jobs = cluster.jobs
    deny = plan.denied.append
    for entry in order:
        job = jobs[entry.job_id]
        if job.state is not JobState.QUEUED:
            continue
        template = templates[job.queue_name]
        tid = template.template_id

        # a hopeless key implies cover() would fail too: supply for tid has
        # not grown since, because every grant below clears tid's keys
        key = (tid, job.cores)
        if key in hopeless:
            deny(Denial(job.job_id, tid, hopeless[key]))
            continue
        alloc = allocs[tid]
        if ledger.cover(tid, job.cores) is not None:
            continue

        # R1
        best = None
        for vm in r1.get(tid, ()):
            if vm.vm_id in ledger.granted or vm.vm_id in ledger.held or vm.free_cores < job.cores:
                continue
            if best is None or (vm.free_cores, vm.vm_id) < (best.free_cores, best.vm_id):
                best = vm
        if best is not None:
            ledger.granted.add(best.vm_id)
            ledger.add_supply(tid, best.vm_id, best.free_cores - job.cores)
            forget(tid)
            plan.actions.append(Action(ActionKind.CLEAR_OFFLINE, vm_id=best.vm_id, job_id=job.job_id))
            continue

        reasons = set()
        # R2
        candidates = [v for v in r2.get(tid, ()) if v.vm_id not in ledger.granted and v.vm_id not in ledger.evicted]
        if candidates:
            chosen = target = None
            if alloc not in no_room:
                if cfg.migrate_before_start:
                    target = place(alloc, hosts, ledger.fits_now)
                    if target is not None:
                        chosen = next((v for v in candidates if v.host_id == target), candidates[0])
                else:
                    for vm in candidates:
                        if ledger.fits_now(cluster.hosts[vm.host_id], alloc):
                            chosen, target = vm, vm.host_id
                            break
            if chosen is not None:
                ledger.granted.add(chosen.vm_id)
                ledger.claim(target, alloc)
                ledger.add_supply(tid, chosen.vm_id, alloc.cpu_cores - job.cores)
                forget(tid)
                if chosen.host_id != target:
                    plan.actions.append(
                        Action(ActionKind.MIGRATE, vm_id=chosen.vm_id, host_id=target, job_id=job.job_id)
                    )
                plan.actions.append(Action(ActionKind.POWER_ON, vm_id=chosen.vm_id, host_id=target, job_id=job.job_id))
                continue
            if cfg.migrate_before_start:
                no_room.add(alloc)
            reasons.add("capacity")

        # R3
        if ledger.pool_free_now() < template.image_size_gib:
            reasons.add("pool")
        else:
            target = None if alloc in no_room else place(alloc, hosts, ledger.fits_now)
            if target is not None:
                clone_seq += 1
                ledger.claim(target, alloc)
                ledger.pool_now += template.image_size_gib
                ledger.pool_future += template.image_size_gib
                ledger.add_supply(tid, f"<clone-{clone_seq}>", alloc.cpu_cores - job.cores)
                forget(tid)
                plan.actions.append(Action(ActionKind.CLONE, template_id=tid, host_id=target, job_id=job.job_id))
                continue
            no_room.add(alloc)
            reasons.add("capacity")

        # denied: pick what the release pass must free for this job
        host_id, victims, evictions = None, [], []
        if "capacity" in reasons and (tid, alloc) not in no_victims:
            host_id, victims = _pick_victims(cluster, ledger, alloc, tid, keep)
            if host_id is None:
                no_victims.add((tid, alloc))
            else:
                for vm in victims:
                    ledger.release(vm)
                ledger.reserve(host_id, alloc)
        if "pool" in reasons:
            size = template.image_size_gib
            evictions = _pick_evictions(cluster, ledger, cfg, size, tid)
            for vm in evictions:
                ledger.evicted.add(vm.vm_id)
                ledger.pool_future -= cluster.pool.images[vm.vm_id]
            if not evictions and ledger.pool_free_future() < size:
                # nothing powered off can go; shut idle VMs down so their images can
                pool_victims = _pick_pool_victims(cluster, ledger, cfg, size, tid, keep)
                for vm in pool_victims:
                    ledger.release(vm)
                    ledger.pool_future -= cluster.pool.images[vm.vm_id]
                victims = victims + pool_victims
            if evictions or ledger.pool_free_future() >= size:
                ledger.pool_future += size
        if host_id is None and not evictions and not victims:
            hopeless[key] = frozenset(reasons)
        plan.denied.append(
            Denial(
                job.job_id,
                tid,
                frozenset(reasons),
                host_id,
                tuple(v.vm_id for v in victims),
                tuple(v.vm_id for v in evictions),
            )
        )
    return plan


def release_pass(
    cluster: Cluster,
    order: Sequence[PriorityEntry],
    now_s: int,
    cfg: CrmConfig,
    plan: ActionPlan | None = None,
) -> list[Action]:
    """Plan power-offs and destroys that follow a provisioning walk."""
    if plan is None:
        plan = iterate(cluster, order, now_s, cfg)
    ledger = plan.ledger
    out: list[Action] = []
    off: set[str] = set()

    def power_off(vm: Vm, tag: str, job_id: str | None = None) -> None:
        off.add(vm.vm_id)
        ledger.held.add(vm.vm_id)
        out.append(Action(ActionKind.POWER_OFF, vm_id=vm.vm_id, host_id=vm.host_id, job_id=job_id, tag=tag))

    # demand rule
    for denial in plan.denied:
        for vm_id in denial.victims:
            if vm_id not in off:
                power_off(cluster.vms[vm_id], "demand", denial.job_id)
        for vm_id in denial.evictions:
            out.append(Action(ActionKind.DESTROY, vm_id=vm_id, job_id=denial.job_id, tag="demand"))

    # removed hosts drain
    for host in cluster.hosts.values():
        if not host.enabled:
            for vm in _idle_victims(cluster.vms_on(host.host_id), ledger):
                power_off(vm, "drain")

    # headroom rule
    want = [cfg.headroom.cpu_cores, cfg.headroom.ram_mib, cfg.headroom.scratch_gib]
    if any(want):
        free = ledger.free_after_plan()
        if any(f < w for f, w in zip(free, want)):
            for vm in _idle_victims(cluster.vms.values(), ledger):
                power_off(vm, "headroom")
                free[0] += vm.alloc.cpu_cores
                free[1] += vm.alloc.ram_mib
                free[2] += vm.alloc.scratch_gib
                if all(f >= w for f, w in zip(free, want)):
                    break
    if cfg.pool_headroom_gib and ledger.pool_free_future() < cfg.pool_headroom_gib:
        for vm in _pick_evictions(cluster, ledger, cfg, cfg.pool_headroom_gib, None):
            ledger.evicted.add(vm.vm_id)
            ledger.pool_future -= cluster.pool.images[vm.vm_id]
            out.append(Action(ActionKind.DESTROY, vm_id=vm.vm_id, tag="headroom"))

    # overbooked-host guard
    for host in cluster.hosts.values():
        if not host.overbooked:
            continue
        cap = host.spec.shareable
        alloc = host.allocated
        slots = host.used_slots
        for vm in cluster.vms_on(host.host_id):
            # shutdowns from earlier ticks already settle the host
            if vm.power is PowerState.SHUTTING_DOWN:
                alloc = alloc - vm.alloc
                slots -= 1
        if alloc.fits_within(cap) and slots <= host.spec.vm_slots:
            continue
        # the first idle VM goes even if another rule is also releasing here
        first = min(
            (vm for vm in cluster.vms_on(host.host_id) if vm.is_idle and vm.managed and not vm.reserved),
            key=lambda v: (v.idle_since if v.idle_since is not None else 0, v.vm_id),
            default=None,
        )
        if first is not None and first.vm_id not in off and first.vm_id not in ledger.granted:
            power_off(first, "overbook_guard")
        for vm in cluster.vms_on(host.host_id):
            if vm.vm_id in off:
                alloc = alloc - vm.alloc
                slots -= 1
        for vm in _idle_victims(cluster.vms_on(host.host_id), ledger):
            if alloc.fits_within(cap) and slots <= host.spec.vm_slots:
                break
            power_off(vm, "overbook_guard")
            alloc = alloc - vm.alloc
            slots -= 1
    return out
