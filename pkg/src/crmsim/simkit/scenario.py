"""Scenario files: JSON schema, parsing, integrity checks and echo."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from ..crm import CrmConfig
from ..domain import CrmError, HostSpec, Queue, ResourceVector, VmTemplate
from ..hypervisor import HypervisorConfig
from ..scheduler import SchedulerConfig

DEFAULT_HORIZON_S = 7 * 86400


class SchemaError(CrmError):
    """A scenario document is malformed or references unknown entities."""


_INT0 = {"type": "integer", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_NUM0 = {"type": "number", "minimum": 0}
_ID = {"type": "string", "minLength": 1}

_RUNTIME = {
    "type": "object",
    "required": ["dist"],
    "additionalProperties": False,
    "properties": {
        "dist": {"enum": ["fixed", "exponential", "uniform"]},
        "value": _INT1,
        "mean": {"type": "number", "exclusiveMinimum": 0},
        "low": _INT1,
        "high": _INT1,
    },
}

SCENARIO_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "crmsim scenario",
    "type": "object",
    "required": ["hosts", "templates", "queues", "pool"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "horizon_s": _INT1,
        "hosts": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["host_id", "cpu_cores", "ram_total_mib"],
                "additionalProperties": False,
                "properties": {
                    "host_id": _ID,
                    "cpu_cores": _INT1,
                    "cpu_freq_mhz": _INT0,
                    "ram_total_mib": _INT1,
                    "ram_reserved_mib": _INT0,
                    "scratch_total_gib": _INT0,
                    "vm_slots": _INT1,
                },
            },
        },
        "templates": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["template_id", "image_size_gib", "ram_mib"],
                "additionalProperties": False,
                "properties": {
                    "template_id": _ID,
                    "image_size_gib": _INT1,
                    "cores": _INT1,
                    "ram_mib": _INT1,
                    "scratch_gib": _INT0,
                },
            },
        },
        "queues": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["queue_name", "template_id", "group"],
                "additionalProperties": False,
                "properties": {
                    "queue_name": _ID,
                    "template_id": _ID,
                    "group": _ID,
                    "priority_weight": _NUM0,
                },
            },
        },
        "pool": {
            "type": "object",
            "required": ["capacity_gib"],
            "additionalProperties": False,
            "properties": {"capacity_gib": _INT0},
        },
        "vms": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["vm_id", "template_id", "host_id"],
                "additionalProperties": False,
                "properties": {
                    "vm_id": _ID,
                    "template_id": _ID,
                    "host_id": _ID,
                    "power": {"enum": ["Online", "PoweredOff"]},
                    "offline_flag": {"type": "boolean"},
                    "reserved": {"type": "boolean"},
                    "managed": {"type": "boolean"},
                },
            },
        },
        "scheduler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tick_period_s": _INT1,
                "wait_weight": _NUM0,
                "fairshare_weight": _NUM0,
                "fairshare_halflife_s": _INT1,
                "group_targets": {
                    "type": "object",
                    "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "crm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iteration_period_s": _INT1,
                "migrate_before_start": {"type": "boolean"},
                "headroom": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"cpu_cores": _INT0, "ram_mib": _INT0, "scratch_gib": _INT0},
                },
                "pool_headroom_gib": _INT0,
                "time_window_s": {"oneOf": [_INT0, {"type": "null"}]},
                "multicore_keep_online": {"type": "boolean"},
                "min_instances_per_template": _INT0,
            },
        },
        "hypervisor": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "boot_time_s": _INT0,
                "shutdown_time_s": _INT0,
                "clone_rate_s_per_gib": _INT0,
                "cold_migrate_time_s": _INT0,
            },
        },
        "workload": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "jobs": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["job_id", "queue_name", "runtime_s", "submit_time_s"],
                        "additionalProperties": False,
                        "properties": {
                            "job_id": _ID,
                            "queue_name": _ID,
                            "user": _ID,
                            "cores": _INT1,
                            "runtime_s": _INT1,
                            "submit_time_s": _INT0,
                        },
                    },
                },
                "generator": {
                    "type": "object",
                    "required": ["horizon_s", "streams"],
                    "additionalProperties": False,
                    "properties": {
                        "horizon_s": _INT1,
                        "streams": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "required": ["queue_name", "mean_interarrival_s", "runtime"],
                                "additionalProperties": False,
                                "properties": {
                                    "queue_name": _ID,
                                    "mean_interarrival_s": {"type": "number", "exclusiveMinimum": 0},
                                    "runtime": _RUNTIME,
                                    "cores": _INT1,
                                    "user": _ID,
                                    "start_s": _INT0,
                                    "max_jobs": _INT0,
                                },
                            },
                        },
                    },
                },
            },
        },
        "directives": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["time_s", "kind", "host_id"],
                "additionalProperties": False,
                "properties": {
                    "time_s": _INT0,
                    "kind": {"enum": ["overbook", "host_removal", "host_restore"]},
                    "host_id": _ID,
                    "vm_id": _ID,
                },
            },
        },
    },
}


@dataclass(frozen=True)
class VmSpec:
    vm_id: str
    template_id: str
    host_id: str
    power: str = "PoweredOff"
    offline_flag: bool = True
    reserved: bool = False
    managed: bool = True


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    queue_name: str
    runtime_s: int
    submit_time_s: int
    cores: int = 1
    user: str = "user"


@dataclass(frozen=True)
class StreamSpec:
    queue_name: str
    mean_interarrival_s: float
    runtime: dict
    cores: int = 1
    user: str = "user"
    start_s: int = 0
    max_jobs: int | None = None


@dataclass(frozen=True)
class GeneratorSpec:
    horizon_s: int
    streams: tuple[StreamSpec, ...]


@dataclass(frozen=True)
class Directive:
    time_s: int
    kind: str
    host_id: str
    vm_id: str | None = None


@dataclass
class Scenario:
    hosts: list[HostSpec]
    templates: list[VmTemplate]
    queues: list[Queue]
    pool_capacity_gib: int
    vms: list[VmSpec] = field(default_factory=list)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    crm: CrmConfig = field(default_factory=CrmConfig)
    hypervisor: HypervisorConfig = field(default_factory=HypervisorConfig)
    jobs: list[JobSpec] = field(default_factory=list)
    generator: GeneratorSpec | None = None
    directives: list[Directive] = field(default_factory=list)
    horizon_s: int = DEFAULT_HORIZON_S
    name: str = "scenario"

    @property
    def groups(self) -> list[str]:
        return sorted({q.group for q in self.queues})

    def validate(self) -> None:
        """Referential integrity; raises SchemaError naming the offender."""
        problems = []

        def unique(items, attr, what):
            seen = set()
            for item in items:
                key = getattr(item, attr)
                if key in seen:
                    problems.append(f"duplicate {what} {key!r}")
                seen.add(key)
            return seen

        host_ids = unique(self.hosts, "host_id", "host")
        template_ids = unique(self.templates, "template_id", "template")
        queue_names = unique(self.queues, "queue_name", "queue")
        vm_ids = unique(self.vms, "vm_id", "vm")
        unique(self.jobs, "job_id", "job")
        templates = {t.template_id: t for t in self.templates}
        queues = {q.queue_name: q for q in self.queues}

        for q in self.queues:
            if q.template_id not in template_ids:
                problems.append(f"queue {q.queue_name!r}: unknown template {q.template_id!r}")
        for v in self.vms:
            if v.template_id not in template_ids:
                problems.append(f"vm {v.vm_id!r}: unknown template {v.template_id!r}")
            if v.host_id not in host_ids:
                problems.append(f"vm {v.vm_id!r}: unknown host {v.host_id!r}")
        for j in self.jobs:
            if j.queue_name not in queue_names:
                problems.append(f"job {j.job_id!r}: unknown queue {j.queue_name!r}")
            elif queues[j.queue_name].template_id in templates and j.cores > templates[queues[j.queue_name].template_id].cores:
                problems.append(f"job {j.job_id!r}: {j.cores} cores exceed its VM type")
        if self.generator is not None:
            for s in self.generator.streams:
                if s.queue_name not in queue_names:
                    problems.append(f"generator stream: unknown queue {s.queue_name!r}")
                elif queues[s.queue_name].template_id in templates and s.cores > templates[queues[s.queue_name].template_id].cores:
                    problems.append(f"generator stream {s.queue_name!r}: cores exceed its VM type")
                _check_runtime(s, problems)
        for d in self.directives:
            if d.host_id not in host_ids:
                problems.append(f"directive at {d.time_s}: unknown host {d.host_id!r}")
            if d.kind == "overbook":
                if d.vm_id is None:
                    problems.append(f"overbook directive at {d.time_s}: vm_id required")
                elif d.vm_id not in vm_ids:
                    problems.append(f"overbook directive at {d.time_s}: unknown vm {d.vm_id!r}")
        groups = set(self.groups)
        for g in self.scheduler.group_targets:
            if g not in groups:
                problems.append(f"scheduler.group_targets: unknown group {g!r}")
        image_total = sum(templates[v.template_id].image_size_gib for v in self.vms if v.template_id in templates)
        if image_total > self.pool_capacity_gib:
            problems.append(f"pool: initial images need {image_total} GiB, capacity is {self.pool_capacity_gib}")
        if problems:
            raise SchemaError("; ".join(problems))


def _check_runtime(stream: StreamSpec, problems: list[str]) -> None:
    rt = stream.runtime
    need = {"fixed": ("value",), "exponential": ("mean",), "uniform": ("low", "high")}[rt["dist"]]
    missing = [k for k in need if k not in rt]
    if missing:
        problems.append(f"generator stream {stream.queue_name!r}: runtime needs {', '.join(missing)}")
    elif rt["dist"] == "uniform" and rt["low"] > rt["high"]:
        problems.append(f"generator stream {stream.queue_name!r}: runtime low > high")


def _fmt_path(error: jsonschema.ValidationError) -> str:
    parts = []
    for p in error.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else (f".{p}" if parts else str(p)))
    return "".join(parts) or "<root>"


def parse_scenario(doc: dict) -> Scenario:
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise SchemaError("; ".join(f"{_fmt_path(e)}: {e.message}" for e in errors))
    try:
        scenario = _build(doc)
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    scenario.validate()
    return scenario


def _build(doc: dict) -> Scenario:
    hosts = [
        HostSpec(
            h["host_id"],
            h["cpu_cores"],
            h.get("cpu_freq_mhz", 0),
            h["ram_total_mib"],
            h.get("ram_reserved_mib", 1024),
            h.get("scratch_total_gib", 0),
            h.get("vm_slots", h["cpu_cores"]),
        )
        for h in doc["hosts"]
    ]
    templates = [
        VmTemplate(t["template_id"], t["image_size_gib"], t.get("cores", 1), t["ram_mib"], t.get("scratch_gib", 0))
        for t in doc["templates"]
    ]
    queues = [Queue(q["queue_name"], q["template_id"], q["group"], float(q.get("priority_weight", 0.0))) for q in doc["queues"]]
    vms = [
        VmSpec(
            v["vm_id"],
            v["template_id"],
            v["host_id"],
            v.get("power", "PoweredOff"),
            v.get("offline_flag", not v.get("reserved", False)),
            v.get("reserved", False),
            v.get("managed", True),
        )
        for v in doc.get("vms", [])
    ]
    s = doc.get("scheduler", {})
    scheduler = SchedulerConfig(
        tick_period_s=s.get("tick_period_s", 30),
        wait_weight=float(s.get("wait_weight", 1.0)),
        fairshare_weight=float(s.get("fairshare_weight", 0.0)),
        fairshare_halflife_s=s.get("fairshare_halflife_s", 86400),
        group_targets={k: float(v) for k, v in sorted(s.get("group_targets", {}).items())},
    )
    c = doc.get("crm", {})
    hr = c.get("headroom", {})
    crm = CrmConfig(
        iteration_period_s=c.get("iteration_period_s", scheduler.tick_period_s),
        migrate_before_start=c.get("migrate_before_start", True),
        headroom=ResourceVector(hr.get("cpu_cores", 0), hr.get("ram_mib", 0), hr.get("scratch_gib", 0)),
        pool_headroom_gib=c.get("pool_headroom_gib", 0),
        time_window_s=c.get("time_window_s"),
        multicore_keep_online=c.get("multicore_keep_online", True),
        min_instances_per_template=c.get("min_instances_per_template", 0),
    )
    hypervisor = HypervisorConfig(**doc.get("hypervisor", {}))
    w = doc.get("workload", {})
    jobs = [
        JobSpec(j["job_id"], j["queue_name"], j["runtime_s"], j["submit_time_s"], j.get("cores", 1), j.get("user", "user"))
        for j in w.get("jobs", [])
    ]
    generator = None
    if "generator" in w:
        g = w["generator"]
        generator = GeneratorSpec(
            g["horizon_s"],
            tuple(
                StreamSpec(
                    st["queue_name"],
                    float(st["mean_interarrival_s"]),
                    dict(sorted(st["runtime"].items())),
                    st.get("cores", 1),
                    st.get("user", "user"),
                    st.get("start_s", 0),
                    st.get("max_jobs"),
                )
                for st in g["streams"]
            ),
        )
    directives = [Directive(d["time_s"], d["kind"], d["host_id"], d.get("vm_id")) for d in doc.get("directives", [])]
    return Scenario(
        hosts=hosts,
        templates=templates,
        queues=queues,
        pool_capacity_gib=doc["pool"]["capacity_gib"],
        vms=vms,
        scheduler=scheduler,
        crm=crm,
        hypervisor=hypervisor,
        jobs=jobs,
        generator=generator,
        directives=directives,
        horizon_s=doc.get("horizon_s", DEFAULT_HORIZON_S),
        name=doc.get("name", "scenario"),
    )


def ingest_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(f"{path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return parse_scenario(doc)
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def scenario_to_dict(sc: Scenario) -> dict:
    """Serialize with every default spelled out; parse_scenario inverts it."""
    doc: dict[str, Any] = {
        "name": sc.name,
        "horizon_s": sc.horizon_s,
        "hosts": [
            {
                "host_id": h.host_id,
                "cpu_cores": h.cpu_cores,
                "cpu_freq_mhz": h.cpu_freq_mhz,
                "ram_total_mib": h.ram_total_mib,
                "ram_reserved_mib": h.ram_reserved_mib,
                "scratch_total_gib": h.scratch_total_gib,
                "vm_slots": h.vm_slots,
            }
            for h in sc.hosts
        ],
        "templates": [
            {
                "template_id": t.template_id,
                "image_size_gib": t.image_size_gib,
                "cores": t.cores,
                "ram_mib": t.ram_mib,
                "scratch_gib": t.scratch_gib,
            }
            for t in sc.templates
        ],
        "queues": [
            {"queue_name": q.queue_name, "template_id": q.template_id, "group": q.group, "priority_weight": q.priority_weight}
            for q in sc.queues
        ],
        "pool": {"capacity_gib": sc.pool_capacity_gib},
        "vms": [
            {
                "vm_id": v.vm_id,
                "template_id": v.template_id,
                "host_id": v.host_id,
                "power": v.power,
                "offline_flag": v.offline_flag,
                "reserved": v.reserved,
                "managed": v.managed,
            }
            for v in sc.vms
        ],
        "scheduler": {
            "tick_period_s": sc.scheduler.tick_period_s,
            "wait_weight": sc.scheduler.wait_weight,
            "fairshare_weight": sc.scheduler.fairshare_weight,
            "fairshare_halflife_s": sc.scheduler.fairshare_halflife_s,
            "group_targets": dict(sc.scheduler.group_targets),
        },
        "crm": {
            "iteration_period_s": sc.crm.iteration_period_s,
            "migrate_before_start": sc.crm.migrate_before_start,
            "headroom": {
                "cpu_cores": sc.crm.headroom.cpu_cores,
                "ram_mib": sc.crm.headroom.ram_mib,
                "scratch_gib": sc.crm.headroom.scratch_gib,
            },
            "pool_headroom_gib": sc.crm.pool_headroom_gib,
            "time_window_s": sc.crm.time_window_s,
            "multicore_keep_online": sc.crm.multicore_keep_online,
            "min_instances_per_template": sc.crm.min_instances_per_template,
        },
        "hypervisor": {
            "boot_time_s": sc.hypervisor.boot_time_s,
            "shutdown_time_s": sc.hypervisor.shutdown_time_s,
            "clone_rate_s_per_gib": sc.hypervisor.clone_rate_s_per_gib,
            "cold_migrate_time_s": sc.hypervisor.cold_migrate_time_s,
        },
        "workload": {"jobs": [jobspec_to_dict(j) for j in sc.jobs]},
        "directives": [
            {k: v for k, v in (("time_s", d.time_s), ("kind", d.kind), ("host_id", d.host_id), ("vm_id", d.vm_id)) if v is not None}
            for d in sc.directives
        ],
    }
    if sc.generator is not None:
        doc["workload"]["generator"] = {
            "horizon_s": sc.generator.horizon_s,
            "streams": [
                {
                    k: v
                    for k, v in (
                        ("queue_name", s.queue_name),
                        ("mean_interarrival_s", s.mean_interarrival_s),
                        ("runtime", dict(s.runtime)),
                        ("cores", s.cores),
                        ("user", s.user),
                        ("start_s", s.start_s),
                        ("max_jobs", s.max_jobs),
                    )
                    if v is not None
                }
                for s in sc.generator.streams
            ],
        }
    return doc


def jobspec_to_dict(j: JobSpec) -> dict:
    return {
        "job_id": j.job_id,
        "queue_name": j.queue_name,
        "user": j.user,
        "cores": j.cores,
        "runtime_s": j.runtime_s,
        "submit_time_s": j.submit_time_s,
    }


def write_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2) + "\n")


def builtin_scenarios() -> list[str]:
    """Names of the scenarios shipped with the package."""
    root = resources.files("crmsim") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_scenario(ref: str | Path) -> Path:
    """Map ``builtin:NAME`` to the packaged file; anything else is a path."""
    ref = str(ref)
    if not ref.startswith("builtin:"):
        return Path(ref)
    name = ref[len("builtin:"):]
    if name not in builtin_scenarios():
        raise SchemaError(f"no builtin scenario {name!r} (have: {', '.join(builtin_scenarios())})")
    return Path(str(resources.files("crmsim") / "scenarios" / f"{name}.json"))


def load_scenario(ref: str | Path) -> Scenario:
    return ingest_scenario(resolve_scenario(ref))
