"""Plain-text and CSV reports built from a metrics directory."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from .simkit.metrics import PathSummary, load_group_usage, load_job_records, queue_time_table

PATH_TABLE_HEADER = ["path", "count", "min_s", "median_s", "max_s"]
GROUP_TABLE_HEADER = ["group", "jobs_started", "jobs_completed", "core_seconds", "share"]


def _num(v) -> str:
    if v is None:
        return ""
    return f"{v:g}" if isinstance(v, float) else str(v)


def path_rows(table: list[PathSummary]) -> list[list[str]]:
    return [[s.path, str(s.count), _num(s.min_s), _num(s.median_s), _num(s.max_s)] for s in table]


def group_rows(usage: list[tuple[str, int, int, int]]) -> list[list[str]]:
    total = sum(u[3] for u in usage)
    rows = []
    for group, started, done, core_s in usage:
        share = core_s / total if total else 0.0
        rows.append([group, str(started), str(done), str(core_s), f"{share:.4f}"])
    return rows


def _csv_block(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class Report:
    paths: list[PathSummary]
    groups: list[tuple[str, int, int, int]] = field(default_factory=list)

    def render(self) -> str:
        return (
            "# queue time by provisioning path\n"
            + _csv_block(PATH_TABLE_HEADER, path_rows(self.paths))
            + "\n# group usage\n"
            + _csv_block(GROUP_TABLE_HEADER, group_rows(self.groups))
        )


def build_report(metrics_dir: str | Path) -> tuple[Report, list]:
    jobs = load_job_records(metrics_dir)
    return Report(queue_time_table(jobs), load_group_usage(metrics_dir)), jobs


def write_report(metrics_dir: str | Path, out_dir: str | Path | None = None, plot: bool = True) -> tuple[Report, list[Path]]:
    """Write report.txt, queue_time_table.csv and, optionally, the histogram PNG."""
    report, jobs = build_report(metrics_dir)
    out = Path(out_dir) if out_dir is not None else Path(metrics_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.txt", out / "queue_time_table.csv"]
    written[0].write_text(report.render())
    written[1].write_text(_csv_block(PATH_TABLE_HEADER, path_rows(report.paths)))
    if plot:
        from .plotting import plot_queue_time_histogram

        written.append(plot_queue_time_histogram(jobs, out / "queue_time_histogram.png"))
    return report, written
