"""Priority scheduler: ranks every queued job, blind to node availability.

The resource manager provisions capacity in exactly the order produced
here and never reorders it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

from .domain import Job, JobState, Queue


@dataclass(frozen=True)
class SchedulerConfig:
    # wait_weight=1, fairshare_weight=0 are placeholders, not tuned values
    tick_period_s: int = 30
    wait_weight: float = 1.0
    fairshare_weight: float = 0.0
    fairshare_halflife_s: int = 86400
    group_targets: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.tick_period_s < 1:
            raise ValueError("tick_period_s must be >= 1")
        if self.wait_weight < 0 or self.fairshare_weight < 0:
            raise ValueError("priority weights must be >= 0")
        if self.fairshare_halflife_s <= 0:
            raise ValueError("fairshare_halflife_s must be > 0")
        for group, share in self.group_targets.items():
            if not 0.0 <= share <= 1.0:
                raise ValueError(f"target share for {group!r} must lie in [0, 1]")
        if sum(self.group_targets.values()) > 1.0 + 1e-9:
            raise ValueError("group target shares sum to more than 1")


class PriorityEntry(NamedTuple):
    """One ranked job. Sorting a list of entries yields scheduler order."""

    sort_key: tuple
    job_id: str
    priority: float
    tiebreak: tuple[int, str]

    @classmethod
    def make(cls, job: Job, priority: float) -> PriorityEntry:
        tiebreak = (job.submit_time_s, job.job_id)
        return cls((-priority, tiebreak), job.job_id, priority, tiebreak)


class UsageLedger:
    """Per-group consumed core-seconds with continuous exponential decay.

    Writes are additive; decay is applied lazily on read so the result does
    not depend on how writes are batched.
    """

    def __init__(self, halflife_s: float):
        if halflife_s <= 0:
            raise ValueError("halflife_s must be > 0")
        self.halflife_s = halflife_s
        self._raw: dict[str, tuple[float, float]] = {}
        self.total_recorded: dict[str, float] = {}

    def record_usage(self, group: str, core_seconds: float, now_s: float) -> UsageLedger:
        value = self.decayed(group, now_s) + core_seconds
        self._raw[group] = (value, now_s)
        self.total_recorded[group] = self.total_recorded.get(group, 0.0) + core_seconds
        return self

    def decayed(self, group: str, now_s: float) -> float:
        try:
            value, stamp = self._raw[group]
        except KeyError:
            return 0.0
        return value * 2.0 ** (-(now_s - stamp) / self.halflife_s)

    def groups(self) -> list[str]:
        return sorted(self._raw)

    def share(self, group: str, now_s: float) -> float:
        total = sum(self.decayed(g, now_s) for g in self._raw)
        if total <= 0.0:
            return 0.0
        return self.decayed(group, now_s) / total

    def shares(self, now_s: float) -> dict[str, float]:
        decayed = {g: self.decayed(g, now_s) for g in sorted(self._raw)}
        total = sum(decayed.values())
        if total <= 0.0:
            return {g: 0.0 for g in decayed}
        return {g: v / total for g, v in decayed.items()}


def _queue_bonus(queue: Queue, cfg: SchedulerConfig, shares: Mapping[str, float]) -> float:
    """Everything in the priority that does not depend on the job's wait."""
    if not cfg.fairshare_weight:
        return queue.priority_weight
    deficit = cfg.group_targets.get(queue.group, 0.0) - shares.get(queue.group, 0.0)
    return cfg.fairshare_weight * deficit + queue.priority_weight


def compute_priority(
    job: Job,
    now_s: int,
    usage: UsageLedger,
    cfg: SchedulerConfig,
    queues: Mapping[str, Queue],
    shares: Mapping[str, float] | None = None,
) -> float:
    """Weighted sum of minutes waited, fair-share deficit and queue weight.

    ``shares`` may carry precomputed decayed usage shares to avoid
    recomputing them per job; groups missing from it have share 0.
    """
    if job.state is not JobState.QUEUED:
        raise ValueError(f"job {job.job_id} is not queued")
    if shares is None:
        shares = usage.shares(now_s) if cfg.fairshare_weight else {}
    wait = cfg.wait_weight / 60.0
    return wait * (now_s - job.submit_time_s) + _queue_bonus(queues[job.queue_name], cfg, shares)


def ordered_queue(
    jobs: Iterable[Job],
    now_s: int,
    usage: UsageLedger,
    cfg: SchedulerConfig,
    queues: Mapping[str, Queue],
) -> list[PriorityEntry]:
    # same arithmetic as compute_priority, hoisted out of the per-job loop
    shares = usage.shares(now_s) if cfg.fairshare_weight else {}
    wait = cfg.wait_weight / 60.0
    bonus = {name: _queue_bonus(q, cfg, shares) for name, q in queues.items()}
    entries = []
    for job in jobs:
        if job.state is not JobState.QUEUED:
            continue
        priority = wait * (now_s - job.submit_time_s) + bonus[job.queue_name]
        tiebreak = (job.submit_time_s, job.job_id)
        entries.append(PriorityEntry((-priority, tiebreak), job.job_id, priority, tiebreak))
    entries.sort()
    return entries
