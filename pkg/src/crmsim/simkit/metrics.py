"""Run metrics, the per-path queue-time table, and CSV export."""

from __future__ import annotations

import bisect
import csv
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PATHS = ("free", "offline", "powered_on", "cloned")

# seconds; last bucket is open-ended
HISTOGRAM_EDGES = (0, 10, 30, 40, 60, 90, 120, 300, 600, 900, 1800, 3600, 14400, 86400)

QUEUE_TIME_HEADER = [
    "job_id", "queue_name", "group", "user", "cores", "path",
    "submit_time_s", "start_time_s", "end_time_s", "queue_time_s",
]
HISTOGRAM_HEADER = ["bucket_lo_s", "bucket_hi_s", "count"]
UTILIZATION_HEADER = [
    "time_s", "host_id", "cores_allocated", "cores_total", "ram_allocated_mib",
    "ram_shareable_mib", "slots_used", "vm_slots", "cores_busy",
]
ACTIONS_HEADER = ["action", "tag", "count"]
GROUP_HEADER = ["group", "jobs_started", "jobs_completed", "core_seconds"]


def bucket_index(queue_time_s: int) -> int:
    return bisect.bisect_right(HISTOGRAM_EDGES, queue_time_s) - 1


def bucket_bounds() -> list[tuple[int, int | None]]:
    his = list(HISTOGRAM_EDGES[1:]) + [None]
    return list(zip(HISTOGRAM_EDGES, his))


@dataclass
class JobRecord:
    job_id: str
    queue_name: str
    group: str
    user: str
    cores: int
    path: str | None
    submit_time_s: int
    start_time_s: int | None
    end_time_s: int | None

    @property
    def queue_time_s(self) -> int | None:
        if self.start_time_s is None:
            return None
        return self.start_time_s - self.submit_time_s


@dataclass
class Metrics:
    jobs: list[JobRecord] = field(default_factory=list)
    utilization: list[tuple] = field(default_factory=list)
    actions: Counter = field(default_factory=Counter)
    group_core_seconds: dict[str, int] = field(default_factory=dict)
    end_time_s: int = 0

    @property
    def queue_times(self) -> dict[str, int]:
        return {j.job_id: j.queue_time_s for j in self.jobs if j.start_time_s is not None}

    def action_count(self, kind: str) -> int:
        return sum(n for (k, _), n in self.actions.items() if k == kind)

    @property
    def completed(self) -> int:
        return sum(1 for j in self.jobs if j.end_time_s is not None)

    def histogram(self) -> list[tuple[int, int | None, int]]:
        counts = [0] * len(HISTOGRAM_EDGES)
        for qt in self.queue_times.values():
            counts[bucket_index(qt)] += 1
        return [(lo, hi, n) for (lo, hi), n in zip(bucket_bounds(), counts)]

    def group_summary(self) -> list[tuple[str, int, int, int]]:
        started: Counter = Counter()
        done: Counter = Counter()
        for j in self.jobs:
            if j.start_time_s is not None:
                started[j.group] += 1
            if j.end_time_s is not None:
                done[j.group] += 1
        groups = sorted(set(self.group_core_seconds) | set(started))
        return [(g, started[g], done[g], self.group_core_seconds.get(g, 0)) for g in groups]


@dataclass(frozen=True)
class PathSummary:
    path: str
    count: int
    min_s: int | None
    median_s: float | None
    max_s: int | None


def queue_time_table(metrics: Metrics | list[JobRecord]) -> list[PathSummary]:
    """Queue-time min/median/max per provisioning path, in fixed path order."""
    jobs = metrics.jobs if isinstance(metrics, Metrics) else metrics
    buckets: dict[str, list[int]] = {p: [] for p in PATHS}
    for j in jobs:
        if j.start_time_s is not None and j.path in buckets:
            buckets[j.path].append(j.queue_time_s)
    out = []
    for p in PATHS:
        vals = buckets[p]
        if vals:
            out.append(PathSummary(p, len(vals), min(vals), statistics.median(vals), max(vals)))
        else:
            out.append(PathSummary(p, 0, None, None, None))
    return out


def histogram_by_path(jobs: list[JobRecord]) -> dict[str, list[int]]:
    """Bucket counts per provisioning path over the shared histogram edges."""
    out = {p: [0] * len(HISTOGRAM_EDGES) for p in PATHS}
    for j in jobs:
        if j.start_time_s is not None and j.path in out:
            out[j.path][bucket_index(j.queue_time_s)] += 1
    return out


def _cell(v):
    return "" if v is None else v


def export_metrics(metrics: Metrics, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def write(name, header, rows):
        path = out / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
        written.append(path)

    write(
        "queue_times.csv",
        QUEUE_TIME_HEADER,
        (
            (j.job_id, j.queue_name, j.group, j.user, j.cores, j.path, j.submit_time_s,
             j.start_time_s, j.end_time_s, j.queue_time_s)
            for j in metrics.jobs
        ),
    )
    write("queue_time_histogram.csv", HISTOGRAM_HEADER, metrics.histogram())
    write("utilization.csv", UTILIZATION_HEADER, metrics.utilization)
    write("actions.csv", ACTIONS_HEADER, ((k, t, n) for (k, t), n in sorted(metrics.actions.items())))
    write("group_usage.csv", GROUP_HEADER, metrics.group_summary())
    return written


def _opt_int(s: str) -> int | None:
    return int(s) if s != "" else None


def load_job_records(metrics_dir: str | Path) -> list[JobRecord]:
    path = Path(metrics_dir) / "queue_times.csv"
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != QUEUE_TIME_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            JobRecord(
                r["job_id"], r["queue_name"], r["group"], r["user"], int(r["cores"]), r["path"] or None,
                int(r["submit_time_s"]), _opt_int(r["start_time_s"]), _opt_int(r["end_time_s"]),
            )
            for r in reader
        ]


def load_group_usage(metrics_dir: str | Path) -> list[tuple[str, int, int, int]]:
    path = Path(metrics_dir) / "group_usage.csv"
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            (r["group"], int(r["jobs_started"]), int(r["jobs_completed"]), int(r["core_seconds"]))
            for r in reader
        ]
