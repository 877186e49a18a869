"""Queue-time histogram figure rendered with matplotlib's Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from .simkit.metrics import PATHS, JobRecord, bucket_bounds, histogram_by_path  # noqa: E402

PATH_COLORS = {
    "free": "#4c72b0",
    "offline": "#55a868",
    "powered_on": "#dd8452",
    "cloned": "#c44e52",
}

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _bucket_label(lo: int, hi: int | None) -> str:
    def fmt(s: int) -> str:
        if s >= 3600 and s % 3600 == 0:
            return f"{s // 3600}h"
        if s >= 60 and s % 60 == 0:
            return f"{s // 60}m"
        return f"{s}s"

    return f">={fmt(lo)}" if hi is None else f"{fmt(lo)}-{fmt(hi)}"


def plot_queue_time_histogram(jobs: list[JobRecord], path: str | Path, title: str | None = None) -> Path:
    """Stacked bar chart of started jobs per queue-time bucket, split by path.

    Buckets are unequal in width, so bars are drawn on a categorical axis.
    """
    path = Path(path)
    counts = histogram_by_path(jobs)
    labels = [_bucket_label(lo, hi) for lo, hi in bucket_bounds()]
    xs = range(len(labels))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(7.0, 3.6))
        bottom = [0] * len(labels)
        for p in PATHS:
            ax.bar(xs, counts[p], bottom=bottom, color=PATH_COLORS[p], label=p, width=0.8)
            bottom = [b + c for b, c in zip(bottom, counts[p])]
        ax.set_xticks(list(xs))
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax.set_xlabel("queue time")
        ax.set_ylabel("jobs")
        ax.yaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_title(title or "Job queue time distribution")
        ax.legend(title="provisioning path", frameon=False)
        fig.tight_layout()
        # no Software/date metadata so repeated renders are byte-identical
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
    return path
