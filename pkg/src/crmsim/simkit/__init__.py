"""Discrete-event simulation of the cluster around the resource manager."""

from .engine import Event, EventKind, EventLog, Simulation, build_cluster, run
from .metrics import Metrics, PathSummary, export_metrics, queue_time_table
from .scenario import (
    Scenario,
    SchemaError,
    builtin_scenarios,
    ingest_scenario,
    load_scenario,
    parse_scenario,
    scenario_to_dict,
    write_scenario,
)

__all__ = [
    "Event",
    "EventKind",
    "EventLog",
    "Metrics",
    "PathSummary",
    "Scenario",
    "SchemaError",
    "Simulation",
    "build_cluster",
    "builtin_scenarios",
    "export_metrics",
    "ingest_scenario",
    "load_scenario",
    "parse_scenario",
    "queue_time_table",
    "run",
    "scenario_to_dict",
    "write_scenario",
]
