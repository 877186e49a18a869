"""Seeded workload generation.

Each generator stream draws from two independent PRNG streams (arrivals
and runtimes) keyed by the run seed and the stream's queue name, so adding
or removing a queue leaves every other stream's jobs unchanged.
"""

from __future__ import annotations

import zlib

import numpy as np

from .scenario import GeneratorSpec, JobSpec, Scenario, SchemaError, StreamSpec


def stream_rng(seed: int, *labels: str) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [zlib.crc32(label.encode()) for label in labels]
    return np.random.default_rng(key)


def _runtime(rng: np.random.Generator, spec: dict) -> int:
    dist = spec["dist"]
    if dist == "fixed":
        return int(spec["value"])
    if dist == "exponential":
        return max(1, int(round(rng.exponential(spec["mean"]))))
    return int(rng.integers(spec["low"], spec["high"], endpoint=True))


def generate_stream(stream: StreamSpec, horizon_s: int, seed: int, ordinal: int = 0) -> list[JobSpec]:
    label = stream.queue_name if ordinal == 0 else f"{stream.queue_name}#{ordinal}"
    arrivals = stream_rng(seed, label, "arrivals")
    runtimes = stream_rng(seed, label, "runtimes")
    prefix = stream.queue_name if ordinal == 0 else f"{stream.queue_name}.{ordinal}"
    jobs = []
    t = float(stream.start_s)
    while True:
        if stream.max_jobs is not None and len(jobs) >= stream.max_jobs:
            break
        t += arrivals.exponential(stream.mean_interarrival_s)
        submit = int(t)
        if submit >= horizon_s:
            break
        jobs.append(
            JobSpec(
                f"{prefix}-{len(jobs):06d}",
                stream.queue_name,
                _runtime(runtimes, stream.runtime),
                submit,
                stream.cores,
                stream.user,
            )
        )
    return jobs


def generate(gen: GeneratorSpec, seed: int) -> list[JobSpec]:
    seen: dict[str, int] = {}
    jobs: list[JobSpec] = []
    for stream in gen.streams:
        ordinal = seen.get(stream.queue_name, 0)
        seen[stream.queue_name] = ordinal + 1
        jobs.extend(generate_stream(stream, gen.horizon_s, seed, ordinal))
    jobs.sort(key=lambda j: (j.submit_time_s, j.job_id))
    return jobs


def materialize(sc: Scenario, seed: int) -> list[JobSpec]:
    """Explicit jobs plus generated ones, in submission order."""
    jobs = list(sc.jobs)
    if sc.generator is not None:
        jobs.extend(generate(sc.generator, seed))
    jobs.sort(key=lambda j: (j.submit_time_s, j.job_id))
    ids = [j.job_id for j in jobs]
    if len(set(ids)) != len(ids):
        raise SchemaError("generated job ids collide with explicit job ids")
    return jobs
