import csv
import json

import pytest

from tailharness import cli, runner
from tailharness.scenario import parse_scenario, parse_sweep

SMALL = """\
[scenario]
name = small
mode = {mode}
repetitions = 1

[server s0]
workload = exponential
mean_service_us = 200
workload_seed = 3

[server s1]
mean_service_us = 200

[balancer]
backends = s0, s1
policy = round_robin

[client a]
target = balancer
total_requests = 200
schedule = 0:200

[client b]
target = s1
start_delay_s = 0.3
total_requests = 100
schedule = 0:200
"""


def small(mode):
    return parse_scenario("small.scenario", SMALL.format(mode=mode))


@pytest.mark.parametrize("mode", ["inprocess", "process"])
def test_scenario_report_is_complete(tmp_path, mode, no_orphans):
    rp = runner.run_scenario(small(mode), tmp_path)
    assert rp.ok, rp.errors
    for name, n in (("a", 200), ("b", 100)):
        rows = list(csv.DictReader(open(tmp_path / f"client-{name}.csv")))
        assert len(rows) == n
        assert len({r["request_id"] for r in rows}) == n
    assert rp.client_status["b"]["start_offset_s"] == pytest.approx(0.3)
    assert rp.lifetime_s("a") == pytest.approx(1.0, rel=0.2)
    scopes = {r["scope"] for r in csv.DictReader(open(tmp_path / "summary.csv"))}
    assert {"client:a", "client:b", "all"} <= scopes
    manifest = (tmp_path / "manifest.txt").read_text()
    assert "status: ok" in manifest and "client b:" in manifest


def test_warmup_exclusion(tmp_path):
    spec = small("inprocess")
    rp = runner.run_scenario(spec, tmp_path)
    every = rp.samples("a")
    rp.warmup_s = 0.5
    kept = rp.samples("a")
    assert 0 < len(kept) < len(every)
    assert min(s.send_offset_s for s in kept) >= 0.5


def test_failed_component_marks_run(tmp_path, no_orphans):
    spec = small("process")
    spec.servers["s0"].listen_address = "256.0.0.1:0"
    rp = runner.run_scenario(spec, tmp_path)
    assert not rp.ok and rp.errors
    assert "status: failed" in (tmp_path / "manifest.txt").read_text()


def _sweep(tmp_path, reps, qps="100, 200"):
    (tmp_path / "base.scenario").write_text(SMALL.format(mode="inprocess"))
    (tmp_path / "s.sweep").write_text(f"[sweep]\nscenario = base.scenario\nqps = {qps}\n"
                                      f"repetitions = {reps}\nduration_s = 0.5\n")
    return parse_sweep(tmp_path / "s.sweep")


def test_sweep_single_repetition_leaves_ci_empty(tmp_path):
    rp = runner.run_sweep(_sweep(tmp_path, 1), tmp_path / "out")
    assert rp.ok
    rows = list(csv.DictReader(open(rp.csv_path)))
    assert len(rows) == 6
    assert all(r["ci_low"] == "" and r["mean"] for r in rows)
    assert any("confidence interval" in w for w in rp.warnings)


def test_compare_self_and_grid_mismatch(tmp_path):
    a = runner.run_sweep(_sweep(tmp_path, 2), tmp_path / "a")
    res = runner.compare_runs(a, a)
    assert all(r.t_statistic == 0 and r.p_value == 1 for r in res.values())
    assert "T-statistic / P-value" in runner.format_ttest_table(res)
    b_dir = tmp_path / "b"
    b_dir.mkdir()
    (b_dir / "sweep.csv").write_text("qps,metric,mean,ci_low,ci_high\n100,mean,1,,\n300,mean,2,,\n")
    with pytest.raises(runner.GridMismatch, match="300"):
        runner.compare_runs(a.csv_path, b_dir / "sweep.csv", ["mean"])


def test_repetitions_export(tmp_path):
    reports = runner.run_repetitions(small("inprocess"), tmp_path, repetitions=5)
    assert all(rp.ok for rp in reports)
    rows = {r["metric"]: r for r in csv.DictReader(open(tmp_path / "repetitions.csv"))}
    assert rows["p99"]["n"] == "5" and rows["p99"]["median"] and rows["p99"]["ci_low"]


def test_cli_run_stats_compare(tmp_path, capsys, no_orphans):
    scen = tmp_path / "small.scenario"
    scen.write_text(SMALL.format(mode="process"))
    assert cli.main(["run", str(scen), "--out", str(tmp_path / "r")]) == 0
    assert cli.main(["stats", str(tmp_path / "r" / "client-a.csv"), str(tmp_path / "r" / "client-b.csv"),
                     "--out", str(tmp_path / "s.csv")]) == 0
    assert (tmp_path / "s.csv").read_text().startswith("scope,")
    bad = tmp_path / "bad.scenario"
    bad.write_text("[scenario]\n[server s0]\nworkers = zero\n")
    assert cli.main(["run", str(bad)]) == 2
    assert "bad.scenario:3:" in capsys.readouterr().err


def test_cli_client_status_file(tmp_path):
    from tailharness.server import Server, ServerSpec

    with Server(ServerSpec()) as srv:
        status = tmp_path / "st.json"
        rc = cli.main(["client", "--client-id", "5", "--target", srv.address, "--total-requests", "20",
                       "--schedule", "0:400", "--log", str(tmp_path / "c.csv"), "--status", str(status)])
    assert rc == 0
    st = json.loads(status.read_text())
    assert st["completed"] == 20 and st["error"] is None
