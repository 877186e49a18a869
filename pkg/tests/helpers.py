"""Small builders shared by the unit tests."""

from __future__ import annotations

import random
from contextlib import contextmanager

from crmsim.domain import (
    Cluster,
    HostSpec,
    HostState,
    Job,
    JobState,
    PowerState,
    Queue,
    ResourceVector,
    StoragePool,
    Vm,
    VmTemplate,
    can_fit,
)
from crmsim.scheduler import SchedulerConfig, UsageLedger, ordered_queue


def host(host_id: str, cores: int = 16, freq: int = 2400, ram: int = 65536, reserved: int = 1024,
         scratch: int = 100, slots: int = 8) -> HostSpec:
    return HostSpec(host_id, cores, freq, ram, reserved, scratch, slots)


def template(template_id: str, cores: int = 1, ram: int = 2048, scratch: int = 0, image: int = 10) -> VmTemplate:
    return VmTemplate(template_id, image, cores, ram, scratch)


def make_cluster(hosts, templates, queues=None, pool_gib: int = 10_000) -> Cluster:
    if queues is None:
        queues = [Queue(f"q-{t.template_id}", t.template_id, f"g-{t.template_id}") for t in templates]
    return Cluster(
        hosts={h.host_id: HostState(h) for h in hosts},
        templates={t.template_id: t for t in templates},
        queues={q.queue_name: q for q in queues},
        pool=StoragePool(pool_gib),
    )


def add_vm(cluster: Cluster, vm_id: str, template_id: str, host_id: str, power: PowerState = PowerState.POWERED_OFF,
           offline: bool = True, reserved: bool = False, powered_on_at: int | None = None,
           idle_since: int | None = None) -> Vm:
    t = cluster.templates[template_id]
    online = power is PowerState.ONLINE
    vm = Vm(
        vm_id, template_id, host_id, t.alloc, power=power, offline_flag=offline, reserved=reserved,
        powered_on_at=powered_on_at if powered_on_at is not None else (0 if online else None),
        idle_since=idle_since if idle_since is not None else (0 if online else None),
    )
    cluster.add_vm(vm)
    return vm


def queue_job(cluster: Cluster, job_id: str, queue_name: str, submit: int = 0, cores: int = 1,
              runtime: int = 100) -> Job:
    q = cluster.queues[queue_name]
    job = Job(job_id, queue_name, "u", q.group, runtime, submit, cores)
    cluster.jobs[job_id] = job
    return job


def order_of(cluster: Cluster, now_s: int = 0, cfg: SchedulerConfig | None = None, usage: UsageLedger | None = None):
    cfg = cfg or SchedulerConfig()
    usage = usage or UsageLedger(cfg.fairshare_halflife_s)
    return ordered_queue(cluster.jobs.values(), now_s, usage, cfg, cluster.queues)


def start_job(cluster: Cluster, job: Job, vm: Vm, now_s: int = 0) -> None:
    """Put a job on a VM directly, bypassing dispatch."""
    job.state = JobState.RUNNING
    job.start_time_s = now_s
    job.vm_id = vm.vm_id
    vm.running_job_ids.add(job.job_id)
    vm.free_cores -= job.cores
    vm.idle_since = None


RV = ResourceVector


# placement oracle ------------------------------------------------------------

def brute_force_place(alloc, hosts):
    feasible = [h for h in hosts if can_fit(h, alloc, True) and h.enabled]
    if not feasible:
        return None
    top = max(h.spec.cpu_freq_mhz for h in feasible)
    return min(h.host_id for h in feasible if h.spec.cpu_freq_mhz == top)


def random_hosts(rng: random.Random, n: int) -> list[HostState]:
    hosts = []
    for i in range(n):
        spec = host(
            f"h{rng.randrange(1000):03d}-{i}", cores=rng.randint(1, 16), freq=rng.choice([2000, 2400, 2667, 3000]),
            ram=rng.randint(2048, 32768), reserved=1024, scratch=rng.randint(0, 50), slots=rng.randint(1, 8),
        )
        cap = spec.shareable
        h = HostState(spec, allocated=RV(rng.randint(0, cap.cpu_cores), rng.randint(0, cap.ram_mib), rng.randint(0, cap.scratch_gib)),
                      used_slots=rng.randint(0, spec.vm_slots), enabled=rng.random() > 0.1)
        hosts.append(h)
    rng.shuffle(hosts)
    return hosts


# acceptance reporting --------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@contextmanager
def criterion(number: int, name: str):
    """Record one PASS/FAIL line for an acceptance criterion.

    The body may append a short measurement to the yielded list; it is
    shown next to the verdict.
    """
    detail: list[str] = []
    try:
        yield detail
    except BaseException as exc:
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        ACCEPTANCE_LINES.append(f"criterion {number} {name}: FAIL ({reason})")
        raise
    ACCEPTANCE_LINES.append(f"criterion {number} {name}: PASS ({'; '.join(detail)})")
