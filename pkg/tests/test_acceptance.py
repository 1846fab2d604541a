"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Slow checks drive real multi-process runs. Thresholds are fixed; checks that
need more than one CPU core are marked xfail on single-core hosts but still
run and report their measured verdict.
"""

import dataclasses
import json
import os
import random
import socket
import subprocess
import sys
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailharness import proto, runner, stats
from tailharness.balancer import Balancer, BalancerSpec
from tailharness.client import Client, ClientSpec, QpsSchedule, achieved_rates, parse_address
from tailharness.scenario import parse_scenario, parse_sweep
from tailharness.server import Server, ServerSpec
from tailharness.workload import WorkloadSpec

SCEN = Path(__file__).resolve().parent.parent / "scenarios"
ONE_CORE = (os.cpu_count() or 1) < 2
needs_cores = pytest.mark.xfail(
    ONE_CORE, strict=False,
    reason="servers share a single core here, so extra servers add no CPU capacity")


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Scenario runs shared by several criteria, executed once on first use."""
    cache = {}
    base = tmp_path_factory.mktemp("acceptance")

    def get(name, **overrides):
        key = (name, tuple(sorted(overrides.items())))
        if key not in cache:
            spec = parse_scenario(SCEN / f"{name}.scenario")
            if "policy" in overrides:
                spec = dataclasses.replace(spec, balancer=dataclasses.replace(spec.balancer,
                                                                              policy=overrides["policy"]))
            out = base / "-".join([name] + [f"{k}={v}" for k, v in sorted(overrides.items())])
            cache[key] = runner.run_scenario(spec, out)
        return cache[key]

    return get


# --- 1: persistence -------------------------------------------------------------

def _free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return f"127.0.0.1:{port}"


def _admin(addr, cmd):
    with socket.create_connection(parse_address(addr), timeout=5) as c:
        c.sendall(cmd.encode() + b"\n")
        return c.makefile().readline().strip()


@pytest.mark.slow
def test_criterion_1_persistent_server(tmp_path, verdict):
    admin = _free_port()
    proc = subprocess.Popen([sys.executable, "-m", "tailharness", "serve", "--mean-service-us", "500",
                             "--admin", admin, "--event-log", str(tmp_path / "ev.csv")],
                            stdout=subprocess.PIPE, text=True)
    t0 = time.monotonic()
    try:
        address = proc.stdout.readline().split()[1]
        checks = []
        for cid in (1, 2):
            time.sleep(10)
            checks.append(proc.poll() is None)
            st_ = Client(ClientSpec(cid, address, 200, QpsSchedule.constant(200), seed=cid), None).run()
            checks.append(st_.completed == 200 and st_.error is None)
        time.sleep(0.5)
        counters = json.loads(_admin(admin, "stats"))
        checks.append(proc.poll() is None and counters["active_clients"] == 0 and counters["served_total"] == 400)
        _admin(admin, "stop")
        proc.wait(10)
        checks.append(proc.returncode == 0)
    finally:
        if proc.poll() is None:
            proc.kill()
    elapsed = time.monotonic() - t0
    ok = all(checks) and elapsed < 60
    verdict("criterion 1 (persistent server)", ok,
            f"two clients 10 s apart served, alive until stopped, {elapsed:.1f} s")
    assert ok, checks


# --- 2, 3: budgets and solo-phase tails -------------------------------------------

@pytest.mark.slow
def test_criterion_2_budgets_and_lifetimes(runs, verdict):
    rp = runs("case1")
    assert rp.ok, rp.errors
    want = {"c1": (10000, 50.0), "c2": (7000, 35.0), "c3": (5000, 25.0)}
    parts, ok = [], True
    for name, (budget, life) in want.items():
        rows = len(rp.client_logs[name].read_text().splitlines()) - 1
        got = rp.lifetime_s(name)
        ok &= rows == budget and abs(got - life) <= 0.10 * life
        parts.append(f"{name} {rows}/{budget} req {got:.2f} s (want {life:g}±10%)")
    verdict("criterion 2 (request budgets)", ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_3_solo_phase_tails_match(runs, verdict):
    rp = runs("case1")
    first = stats.summarize(rp.samples("c1"), (0.0, 15.0))
    last = stats.summarize(rp.samples("c3"), (50.0, 60.0))
    rel = abs(last.p99_ms - first.p99_ms) / first.p99_ms
    ok = rel <= 0.25
    verdict("criterion 3 (solo-phase p99)", ok,
            f"client 1 solo p99 {first.p99_ms:.3f} ms, client 3 solo p99 {last.p99_ms:.3f} ms, diff {rel:.1%} (<=25%)")
    assert ok


# --- 4, 5: QPS ladder -------------------------------------------------------------

LADDER_WINDOWS = [(0, 10), (10, 20), (20, 30), (30, 40), (40, 50), (50, 60)]


@pytest.mark.slow
def test_criterion_4_ladder_tail_shape(runs, verdict):
    rp = runs("case2")
    assert rp.ok, rp.errors
    p99 = [stats.summarize(rp.samples(), w).p99_ms for w in LADDER_WINDOWS]
    peak = int(np.argmax(p99))
    rel = abs(p99[5] - p99[0]) / p99[0]
    ok = peak == 4 and rel <= 0.25
    verdict("criterion 4 (ladder p99 shape)", ok,
            "p99 per 10 s window " + ", ".join(f"{v:.2f}" for v in p99)
            + f" ms; peak in window {peak}; first/last differ {rel:.1%} (<=25%)")
    assert ok


@pytest.mark.slow
def test_criterion_5_rate_conformance(runs, verdict):
    rp = runs("case2_light")
    assert rp.ok, rp.errors
    sched = parse_scenario(SCEN / "case2_light.scenario").clients["c1"].schedule
    rates = achieved_rates([s.send_offset_s for s in rp.samples()], sched, 60.0)
    worst = max(abs(a - q) / q for _, _, q, a in rates)
    ok = len(rates) == 6 and worst <= 0.05
    verdict("criterion 5 (rate conformance)", ok,
            ", ".join(f"{q:g}->{a:.1f}" for _, _, q, a in rates) + f" QPS; worst {worst:.2%} (<=5%)")
    assert ok


# --- 6: multi-server benefit --------------------------------------------------------

@pytest.mark.slow
@needs_cores
def test_criterion_6_two_servers_beat_one(tmp_path, verdict):
    one = runner.run_sweep(parse_sweep(SCEN / "sweep_1server.sweep"), tmp_path / "one")
    two = runner.run_sweep(parse_sweep(SCEN / "sweep_2server.sweep"), tmp_path / "two")
    assert one.ok and two.ok
    # single-server saturation: 1 / mean service time, split over two clients
    sat_per_client = 1e6 / parse_scenario(SCEN / "multi_1server.scenario").servers["s0"].workload.mean_service_us / 2
    a, b = one.curve("p99"), two.curve("p99")
    points = [q for q in sorted(a) if q > sat_per_client / 2]
    ok = bool(points) and all(b[q] < a[q] for q in points)
    verdict("criterion 6 (2 servers beat 1)", ok,
            "; ".join(f"{q:g} QPS/client p99 1srv {a[q]:.2f} vs 2srv {b[q]:.2f} ms" for q in points))
    assert ok


# --- 7: load-aware balancing ---------------------------------------------------------

def _placement(rp):
    """Server id each client was pinned to, read from its own response log."""
    out = []
    for name in ("c1", "c2", "c3"):
        ids = {s.server_id for s in rp.samples(name)}
        out.append(ids.pop() if len(ids) == 1 else sorted(ids))
    return out


@pytest.mark.slow
def test_criterion_7a_assignments(runs, verdict):
    rr, la = runs("case3", policy="round_robin"), runs("case3", policy="load_aware")
    assert rr.ok and la.ok, rr.errors + la.errors
    got_rr, got_la = _placement(rr), _placement(la)
    ok = got_la == [0, 1, 1] and got_rr == [0, 1, 0]
    verdict("criterion 7 (assignment)", ok, f"load_aware {got_la} (want [0, 1, 1]); round_robin {got_rr}")
    assert ok


@pytest.mark.slow
@needs_cores
def test_criterion_7b_load_aware_lowers_heavy_client_tail(runs, verdict):
    rr, la = runs("case3", policy="round_robin"), runs("case3", policy="load_aware")
    a, b = stats.summarize(rr.samples("c1")), stats.summarize(la.samples("c1"))
    ok = b.p99_ms < a.p99_ms
    verdict("criterion 7 (500-QPS client p99)", ok,
            f"load_aware {b.p99_ms:.1f} ms vs round_robin {a.p99_ms:.1f} ms")
    assert ok


# --- 8: statistical self-validation ---------------------------------------------------

@pytest.mark.slow
def test_criterion_8_repeat_sweeps_agree(tmp_path, verdict):
    sweep = parse_sweep(SCEN / "selfcheck.sweep")
    assert sweep.repetitions == 13 and len(sweep.qps) == 4
    a = runner.run_sweep(sweep, tmp_path / "a", seed=0)
    b = runner.run_sweep(sweep, tmp_path / "b", seed=7)
    assert a.ok and b.ok
    res = runner.compare_runs(a, b)
    ok = all(abs(r.t_statistic) < 2 and r.p_value > 0.05 for r in res.values())
    verdict("criterion 8 (repeatability)", ok, "; ".join(f"{m} {r.cell()}" for m, r in res.items()))
    assert ok


# --- 9: statistics oracles -------------------------------------------------------------

def _oracle_p(t, dof):
    mpmath.mp.dps = 40
    v = mpmath.mpf(dof)
    return float(mpmath.betainc(v / 2, mpmath.mpf(1) / 2, 0, v / (v + mpmath.mpf(t) ** 2), regularized=True))


def test_criterion_9_statistics_oracles(verdict):
    rng = random.Random(2024)
    pct_ok = True
    for _ in range(1000):
        xs = [rng.random() for _ in range(rng.randint(1, 200))]
        q = rng.uniform(0.01, 1.0)
        ordered = sorted(xs)
        rank = next(r for r in range(1, len(xs) + 1) if mpmath.mpf(r) / len(xs) >= mpmath.mpf(q))
        pct_ok &= stats.percentile(xs, q) == ordered[rank - 1]
    r = stats.welch_t([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    ex_ok = (abs(r.t_statistic + 1) < 1e-12 and abs(r.degrees_of_freedom - 8) < 1e-12
             and abs(r.p_value - _oracle_p(-1.0, 8.0)) < 1e-6 and abs(r.p_value - 0.3466) < 5e-5)
    worst = 0.0
    for _ in range(100):
        x = [rng.gauss(5, rng.uniform(0.3, 3)) for _ in range(rng.randint(2, 25))]
        y = [rng.gauss(rng.uniform(4, 6), rng.uniform(0.3, 3)) for _ in range(rng.randint(2, 25))]
        w = stats.welch_t(x, y)
        worst = max(worst, abs(w.p_value - _oracle_p(w.t_statistic, w.degrees_of_freedom)))
    ok = pct_ok and ex_ok and worst < 1e-9
    verdict("criterion 9 (statistics oracles)", ok,
            f"percentile brute-force {'ok' if pct_ok else 'MISMATCH'}; example t={r.t_statistic:g} "
            f"dof={r.degrees_of_freedom:g} p={r.p_value:.6f}; worst p-value error {worst:.1e} (<1e-9)")
    assert ok


# --- 10: protocol -----------------------------------------------------------------------

frames = st.builds(proto.Frame, kind=st.sampled_from(list(proto.Kind)),
                   request_id=st.integers(0, 2**64 - 1), client_id=st.integers(0, 2**64 - 1),
                   payload=st.binary(max_size=40))


@settings(max_examples=10_000, deadline=None)
@given(frames)
def _roundtrip(frame):
    assert proto.decode(proto.encode(frame)) == (frame, proto.HEADER_SIZE + len(frame.payload))


@settings(max_examples=200, deadline=None)
@given(st.lists(frames, max_size=25), st.integers(1, 64))
def _self_delimiting(batch, chunk):
    data = b"".join(map(proto.encode, batch))
    buf = proto.FrameBuffer()
    out = [f for i in range(0, len(data), chunk) for f in buf.feed(data[i:i + chunk])]
    assert out == batch and buf.pending == 0


def _frame_log(tmp_path, via_balancer):
    """(request_id, server_id) sequence seen by a client, and the server's served sequence."""
    ev = tmp_path / f"ev-{via_balancer}.csv"
    srv = Server(ServerSpec(server_id=3, workload=WorkloadSpec("fixed", 100.0)), str(ev)).start()
    bal = Balancer(BalancerSpec("127.0.0.1:0", [srv.address])).start() if via_balancer else None
    try:
        cl = Client(ClientSpec(6, (bal or srv).address, 300, QpsSchedule.constant(100), seed=9), None)
        cl.run()
    finally:
        if bal:
            bal.stop()
        srv.stop()
    client_side = sorted((e.request_id, e.server_id) for e in cl.state.log)
    rows = [line.split(",") for line in ev.read_text().splitlines()[1:]]
    server_side = [(r[0], r[2], r[3]) for r in rows if r[0] in ("hello", "served", "bye")]
    return client_side, server_side


def test_criterion_10_protocol(tmp_path, verdict):
    _roundtrip()
    _self_delimiting()
    direct = _frame_log(tmp_path, False)
    proxied = _frame_log(tmp_path, True)
    ok = direct == proxied and len(direct[0]) == 300
    verdict("criterion 10 (protocol)", ok,
            "10^4 round trips, chunked streams and balancer frame logs "
            + ("identical" if ok else "DIFFER"))
    assert ok
