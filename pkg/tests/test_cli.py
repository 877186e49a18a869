import json

import pytest

from crmsim.cli import EXIT_INTEGRITY, EXIT_SCHEMA, EXIT_USAGE, main
from crmsim.report import PATH_TABLE_HEADER, path_rows
from crmsim.simkit import load_scenario, parse_scenario, queue_time_table, run, scenario_to_dict


def test_validate_good_file_writes_nothing(tmp_path, capsys):
    before = set(tmp_path.iterdir())
    assert main(["validate", "builtin:low_load"]) == 0
    assert set(tmp_path.iterdir()) == before
    assert capsys.readouterr().out.startswith("ok low-load")


def test_validate_bad_file_exit_3(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"hosts": []}))
    assert main(["validate", str(p)]) == EXIT_SCHEMA
    assert main(["validate", str(tmp_path / "absent.json")]) == EXIT_SCHEMA


def test_usage_errors_exit_2():
    assert main(["run", "--scenario", "builtin:low_load", "--out", "x", "--bogus"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["run", "--scenario", "builtin:low_load", "--out", "x", "--seed", "-1"]) == EXIT_USAGE
    assert main(["validate"]) == EXIT_USAGE


def test_integrity_failure_exit_4(tmp_path):
    doc = {
        "hosts": [{"host_id": "h1", "cpu_cores": 1, "ram_total_mib": 8192}],
        "templates": [{"template_id": "t", "image_size_gib": 1, "ram_mib": 1024}],
        "queues": [{"queue_name": "q", "template_id": "t", "group": "g"}],
        "pool": {"capacity_gib": 10},
        "vms": [{"vm_id": f"v{i}", "template_id": "t", "host_id": "h1", "power": "Online"} for i in range(2)],
    }
    p = tmp_path / "ob.json"
    p.write_text(json.dumps(doc))
    assert main(["run", "--scenario", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_INTEGRITY


def test_run_twice_same_digest(tmp_path):
    for d in ("a", "b"):
        assert main(["run", "--scenario", "builtin:starvation", "--seed", "7", "--out", str(tmp_path / d), "--quiet"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "events.sha256").read_text() == (b / "events.sha256").read_text()
    assert (a / "events.jsonl").read_bytes() == (b / "events.jsonl").read_bytes()
    for name in ("queue_times.csv", "utilization.csv", "actions.csv", "queue_time_histogram.csv", "scenario.json"):
        assert (a / name).is_file()


def test_replicas_get_own_directories(tmp_path, capsys):
    assert main(["run", "--scenario", "builtin:low_load", "--seed", "3", "--replicas", "2", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in out] == ["seed=3", "seed=4"]
    assert (tmp_path / "replica-000" / "events.jsonl").is_file()
    assert (tmp_path / "replica-001" / "events.jsonl").is_file()


def test_report_matches_library_table(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--scenario", "builtin:low_load", "--out", str(out), "--quiet"]) == 0
    assert main(["report", str(out)]) == 0
    text = capsys.readouterr().out
    _, metrics = run(load_scenario("builtin:low_load"), 0)
    expected = [",".join(PATH_TABLE_HEADER)] + [",".join(r) for r in path_rows(queue_time_table(metrics))]
    lines = text.splitlines()
    assert lines[1:6] == expected
    assert (out / "queue_time_table.csv").read_text().splitlines() == expected
    assert (out / "report.txt").read_text() == text
    png = out / "queue_time_histogram.png"
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_plot_is_reproducible(tmp_path):
    out = tmp_path / "run"
    main(["run", "--scenario", "builtin:low_load", "--out", str(out), "--quiet"])
    main(["report", str(out), "--out", str(tmp_path / "r1"), "--quiet"])
    main(["report", str(out), "--out", str(tmp_path / "r2"), "--quiet"])
    assert (tmp_path / "r1" / "queue_time_histogram.png").read_bytes() == (tmp_path / "r2" / "queue_time_histogram.png").read_bytes()


def test_report_missing_metrics_exit_3(tmp_path):
    assert main(["report", str(tmp_path), "--no-plot"]) == EXIT_SCHEMA


def test_gen_workload_round_trips_into_a_scenario(tmp_path):
    wl = tmp_path / "wl.json"
    assert main(["gen-workload", "--scenario", "builtin:starvation", "--seed", "9", "--out", str(wl), "--quiet"]) == 0
    jobs = json.loads(wl.read_text())["jobs"]
    assert jobs and jobs == sorted(jobs, key=lambda j: (j["submit_time_s"], j["job_id"]))
    # replaying the explicit list gives the same run as the generator
    sc = load_scenario("builtin:starvation")
    doc = scenario_to_dict(sc)
    doc["workload"] = {"jobs": jobs}
    _, m1 = run(sc, 9)
    _, m2 = run(parse_scenario(doc), 9)
    assert m1.jobs == m2.jobs


def test_gen_workload_stdout(capsys):
    assert main(["gen-workload", "--scenario", "builtin:low_load"]) == 0
    assert len(json.loads(capsys.readouterr().out)["jobs"]) == 4


@pytest.mark.parametrize("argv", [["--help"], ["run", "--help"]])
def test_help_exits_zero(argv, capsys):
    assert main(argv) == 0
