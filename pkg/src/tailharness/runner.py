"""Runs scenarios and sweeps, collects logs and writes reports.

Components run either as child processes (``mode = process``, the realistic
setup) or as threads of the calling process (``mode = inprocess``, for
tests). Either way the orchestrator only supervises: it starts servers and the
balancer, probes readiness, releases all clients against one shared epoch,
waits for every budget to complete and then stops everything.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import signal
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import proto, stats
from .balancer import Balancer, BalancerSpec
from .client import Client, ClientSpec, parse_address
from .scenario import ScenarioSpec, SweepSpec
from .server import Server, ServerSpec

log = logging.getLogger(__name__)

PROBE_CLIENT_ID = 2**64 - 1
EPOCH_LEAD_S = 0.3
METRICS = ("mean", "p95", "p99")


class RunError(RuntimeError):
    pass


class GridMismatch(ValueError):
    pass


@dataclass
class ScenarioReport:
    name: str
    out_dir: Path
    status: str = "ok"
    errors: list[str] = field(default_factory=list)
    epoch_ns: int = 0
    client_logs: dict[str, Path] = field(default_factory=dict)
    server_logs: dict[str, Path] = field(default_factory=dict)
    client_status: dict[str, dict] = field(default_factory=dict)
    client_ids: dict[str, int] = field(default_factory=dict)
    summary_csv: Path | None = None
    manifest: Path | None = None
    warmup_s: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def samples(self, client: str | None = None) -> list[stats.LatencySample]:
        names = [client] if client else list(self.client_logs)
        out = []
        for n in names:
            path = self.client_logs[n]
            if path.exists():
                out.extend(stats.read_client_log(path, self.epoch_ns, self.client_ids.get(n, 0)))
        if self.warmup_s:
            starts = {self.client_ids[n]: self.client_status.get(n, {}).get("start_offset_s", 0.0) for n in names}
            out = [s for s in out if s.send_offset_s >= starts.get(s.client_id, 0.0) + self.warmup_s]
        return out

    def lifetime_s(self, client: str) -> float:
        return self.client_status[client]["lifetime_s"]


# --- component launch ----------------------------------------------------------

def _python_cmd(*args: str) -> list[str]:
    return [sys.executable, "-m", "tailharness", *args]


def server_argv(spec: ServerSpec, event_log: Path | None) -> list[str]:
    wl = spec.workload
    argv = ["serve", "--listen", spec.listen_address, "--server-id", str(spec.server_id),
            "--workers", str(spec.workers), "--workload", wl.name,
            "--mean-service-us", repr(wl.mean_service_us), "--workload-seed", str(wl.seed),
            "--queue-capacity", "unbounded" if spec.queue_capacity is None else str(spec.queue_capacity)]
    for key in ("sigma", "item_count", "zipf_exponent"):
        if key in wl.params:
            argv += ["--" + key.replace("_", "-"), str(wl.params[key])]
    if event_log:
        argv += ["--event-log", str(event_log)]
    return argv


def client_argv(spec: ClientSpec, log_path: Path, status_path: Path) -> list[str]:
    return ["client", "--client-id", str(spec.client_id), "--target", spec.target_address,
            "--total-requests", str(spec.total_requests), "--schedule", spec.schedule.format(),
            "--start-delay-s", repr(spec.start_delay_s), "--sender-threads", str(spec.sender_threads),
            "--seed", str(spec.seed), "--log", str(log_path), "--status", str(status_path), "--wait-go"]


def balancer_argv(spec: BalancerSpec, rates_file: Path | None) -> list[str]:
    argv = ["balance", "--listen", spec.listen_address, "--policy", spec.policy]
    for b in spec.backends:
        argv += ["--backend", b]
    if rates_file:
        argv += ["--declared-rates", str(rates_file)]
    return argv


class _Child:
    """A component child process announcing itself with one stdout line."""

    def __init__(self, name: str, argv: list[str], stderr_path: Path):
        self.name = name
        self._err = open(stderr_path, "w")
        self.proc = subprocess.Popen(_python_cmd(*argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     stderr=self._err, text=True, bufsize=1)

    def expect(self, prefix: str, timeout: float = 30.0) -> str:
        result: list[str] = []

        def read():
            for line in self.proc.stdout:
                if line.startswith(prefix):
                    result.append(line[len(prefix):].strip())
                    return

        t = threading.Thread(target=read, daemon=True)
        t.start()
        t.join(timeout)
        if not result:
            raise RunError(f"{self.name} did not report {prefix.strip()!r} within {timeout}s "
                           f"(exit code {self.proc.poll()})")
        return result[0]

    def send(self, line: str) -> None:
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()

    def terminate(self, timeout: float = 10.0) -> int | None:
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        for fh in (self.proc.stdin, self.proc.stdout):
            try:
                fh.close()
            except (OSError, ValueError):
                pass
        self._err.close()
        return self.proc.returncode


def probe(address: str, timeout: float = 10.0) -> float:
    """Round-trip one zero-length REQUEST without a HELLO; returns seconds taken."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            t0 = time.monotonic()
            with socket.create_connection(parse_address(address), timeout=timeout) as s:
                s.sendall(proto.request(PROBE_CLIENT_ID, 0))
                buf = proto.FrameBuffer()
                while True:
                    data = s.recv(4096)
                    if not data:
                        raise RunError(f"{address} closed during readiness probe")
                    frames = buf.feed(data)
                    if frames:
                        return time.monotonic() - t0
        except OSError:
            if time.monotonic() > deadline:
                raise RunError(f"{address} not ready after {timeout}s") from None
            time.sleep(0.05)


def _wait_listening(address: str, timeout: float = 10.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            with socket.create_connection(parse_address(address), timeout=timeout):
                return
        except OSError:
            if time.monotonic() > deadline:
                raise RunError(f"{address} not accepting connections") from None
            time.sleep(0.05)


# --- scenario ------------------------------------------------------------------

def _expected_duration_s(c: ClientSpec) -> float:
    """Time at which the last planned request is due, relative to the client start."""
    remaining = c.total_requests
    iv = c.schedule.intervals
    for i, (start, qps) in enumerate(iv):
        end = iv[i + 1][0] if i + 1 < len(iv) else math.inf
        cap = qps * (end - start)
        if remaining <= cap:
            return start + remaining / qps
        remaining -= cap
    return iv[-1][0]


def run_scenario(spec: ScenarioSpec, out_dir: str | Path, drain_timeout_s: float = 120.0) -> ScenarioReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = ScenarioReport(spec.name, out, warmup_s=spec.warmup_s)
    report.client_ids = {n: c.client_id for n, c in spec.clients.items()}
    runner = _ProcessRun if spec.mode == "process" else _InProcessRun
    try:
        runner(spec, out, report, drain_timeout_s).execute()
    except Exception as exc:  # any component failure marks the run failed, logs stay on disk
        log.exception("scenario %s failed", spec.name)
        report.status = "failed"
        report.errors.append(f"{type(exc).__name__}: {exc}")
    for n, st in report.client_status.items():
        if st.get("error"):
            report.status = "failed"
            report.errors.append(f"client {n}: {st['error']}")
    try:
        _write_summaries(spec, report)
    except Exception as exc:
        report.status = "failed"
        report.errors.append(f"summaries: {exc}")
    _write_manifest(spec, report)
    return report


class _RunBase:
    def __init__(self, spec: ScenarioSpec, out: Path, report: ScenarioReport, drain_timeout_s: float):
        self.spec, self.out, self.report = spec, out, report
        self.drain_timeout_s = drain_timeout_s
        self.server_addr: dict[str, str] = {}
        self.balancer_addr: str | None = None
        for n in spec.clients:
            report.client_logs[n] = out / f"client-{n}.csv"
        for n in spec.servers:
            report.server_logs[n] = out / f"server-{n}.events.csv"

    def resolved(self, c: ClientSpec) -> ClientSpec:
        addr = self.balancer_addr if c.target_address == "balancer" else self.server_addr[c.target_address]
        return dataclasses.replace(c, target_address=addr)

    def balancer_spec(self) -> BalancerSpec:
        b = self.spec.balancer
        return dataclasses.replace(b, backends=[self.server_addr[n] for n in b.backends])

    def client_timeout_s(self, c: ClientSpec) -> float:
        return EPOCH_LEAD_S + c.start_delay_s + _expected_duration_s(c) + self.drain_timeout_s + 30


class _InProcessRun(_RunBase):
    def execute(self) -> None:
        servers: list[Server] = []
        balancer = None
        try:
            for n, s in self.spec.servers.items():
                srv = Server(s, str(self.report.server_logs[n])).start()
                servers.append(srv)
                self.server_addr[n] = srv.address
                probe(srv.address)
            if self.spec.balancer:
                balancer = Balancer(self.balancer_spec()).start()
                self.balancer_addr = balancer.address
                _wait_listening(balancer.address)
            clients = {n: Client(self.resolved(c), str(self.report.client_logs[n]), self.drain_timeout_s)
                       for n, c in self.spec.clients.items()}
            epoch = time.monotonic_ns() + int(EPOCH_LEAD_S * 1e9)
            self.report.epoch_ns = epoch
            errors: dict[str, str] = {}

            def drive(name, cl):
                try:
                    cl.run(epoch)
                except Exception as exc:
                    errors[name] = str(exc)

            threads = {n: threading.Thread(target=drive, args=(n, cl), daemon=True) for n, cl in clients.items()}
            for t in threads.values():
                t.start()
            for n, t in threads.items():
                t.join(self.client_timeout_s(self.spec.clients[n]))
            for n, cl in clients.items():
                self.report.client_status[n] = client_status(cl, epoch, errors.get(n)
                                                       or (None if not threads[n].is_alive() else "client hung"))
        finally:
            if balancer:
                balancer.stop()
            for srv in servers:
                srv.stop()


class _ProcessRun(_RunBase):
    def execute(self) -> None:
        children: list[_Child] = []
        try:
            for n, s in self.spec.servers.items():
                ch = _Child(f"server {n}", server_argv(s, self.report.server_logs[n]),
                            self.out / f"server-{n}.stderr")
                children.append(ch)
                self.server_addr[n] = ch.expect("LISTENING ")
            for addr in self.server_addr.values():
                probe(addr)
            if self.spec.balancer:
                rates_file = None
                if self.spec.balancer.declared_rates:
                    rates_file = self.out / "declared-rates.csv"
                    rates_file.write_text("".join(f"{c},{q}\n" for c, q in self.spec.balancer.declared_rates.items()))
                ch = _Child("balancer", balancer_argv(self.balancer_spec(), rates_file), self.out / "balancer.stderr")
                children.append(ch)
                self.balancer_addr = ch.expect("LISTENING ")
                _wait_listening(self.balancer_addr)
            clients: dict[str, _Child] = {}
            for n, c in self.spec.clients.items():
                status = self.out / f"client-{n}.status.json"
                clients[n] = _Child(f"client {n}", client_argv(self.resolved(c), self.report.client_logs[n], status),
                                    self.out / f"client-{n}.stderr")
                children.append(clients[n])
            for ch in clients.values():
                ch.expect("READY")
            epoch = time.monotonic_ns() + int(EPOCH_LEAD_S * 1e9)
            self.report.epoch_ns = epoch
            for ch in clients.values():
                ch.send(f"GO {epoch}")
            server_children = children[:len(self.spec.servers) + (1 if self.spec.balancer else 0)]
            for n, ch in clients.items():
                deadline = time.monotonic() + self.client_timeout_s(self.spec.clients[n])
                while ch.proc.poll() is None:
                    for sc in server_children:
                        if sc.proc.poll() is not None:
                            raise RunError(f"{sc.name} exited unexpectedly with code {sc.proc.returncode}")
                    if time.monotonic() > deadline:
                        raise RunError(f"client {n} did not finish in time")
                    time.sleep(0.1)
            for n, ch in clients.items():
                status_path = self.out / f"client-{n}.status.json"
                st = json.loads(status_path.read_text()) if status_path.exists() else {
                    "error": f"client exited with code {ch.proc.returncode} without status"}
                if ch.proc.returncode and not st.get("error"):
                    st["error"] = f"client exited with code {ch.proc.returncode}"
                self.report.client_status[n] = st
        finally:
            # clients first, then the balancer, then servers
            for ch in reversed(children):
                ch.terminate()


def client_status(cl: Client, epoch_ns: int, error: str | None = None) -> dict:
    st = cl.state
    first = min((e.send_ns for e in st.log), default=st.start_ns)
    last = max((e.recv_ns for e in st.log), default=st.end_ns or st.start_ns)
    return {
        "client_id": cl.spec.client_id,
        "total_requests": cl.spec.total_requests,
        "sent": st.sent,
        "completed": st.completed,
        "protocol_errors": st.protocol_errors,
        "late_sends": st.late_sends,
        "max_send_lag_ms": st.max_send_lag_ns / 1e6,
        "start_offset_s": (st.start_ns - epoch_ns) / 1e9,
        "first_send_offset_s": (first - epoch_ns) / 1e9,
        "end_offset_s": (last - epoch_ns) / 1e9,
        "lifetime_s": (last - first) / 1e9,
        "error": error or st.error,
    }


def _write_summaries(spec: ScenarioSpec, report: ScenarioReport) -> None:
    rows = []
    all_samples = []
    for n in spec.clients:
        samples = report.samples(n)
        all_samples.extend(samples)
        scope = f"client:{n}"
        rows.append(stats.summary_row(scope, None, None, stats.summarize(samples)))
        if samples:
            st = report.client_status.get(n, {})
            start = math.floor(st.get("start_offset_s", 0.0))
            for lo, hi, s in stats.windows(samples, spec.window_s, start_s=start):
                rows.append(stats.summary_row(scope, lo, hi, s))
    ids = {s.server_id for s in all_samples}
    by_id = {sp.server_id: n for n, sp in spec.servers.items()}
    for sid in sorted(ids):
        sub = [s for s in all_samples if s.server_id == sid]
        rows.append(stats.summary_row(f"server:{by_id.get(sid, sid)}", None, None, stats.summarize(sub)))
    rows.append(stats.summary_row("all", None, None, stats.summarize(all_samples)))
    report.summary_csv = report.out_dir / "summary.csv"
    stats.write_summary_csv(report.summary_csv, rows)


def _write_manifest(spec: ScenarioSpec, report: ScenarioReport) -> None:
    lines = [f"scenario: {spec.name}", f"source: {spec.source}", f"status: {report.status}",
             f"mode: {spec.mode}", f"epoch_ns: {report.epoch_ns}", f"window_s: {spec.window_s}",
             f"warmup_s: {spec.warmup_s}"]
    for n, sp in spec.servers.items():
        wl = sp.workload
        lines.append(f"server {n}: id={sp.server_id} workers={sp.workers} workload={wl.name} "
                     f"mean_service_us={wl.mean_service_us:g} log={report.server_logs[n].name}")
    if spec.balancer:
        lines.append(f"balancer: policy={spec.balancer.policy} backends={','.join(spec.balancer.backends)}")
    for n, c in spec.clients.items():
        st = report.client_status.get(n, {})
        lines.append(
            f"client {n}: id={c.client_id} target={c.target_address} start_delay_s={c.start_delay_s:g} "
            f"total_requests={c.total_requests} schedule={c.schedule.format()!r} "
            f"completed={st.get('completed', 0)} lifetime_s={st.get('lifetime_s', float('nan')):.3f} "
            f"late_sends={st.get('late_sends', 0)} log={report.client_logs[n].name}")
    if report.summary_csv:
        lines.append(f"summary: {report.summary_csv.name}")
    for e in report.errors:
        lines.append(f"error: {e}")
    report.manifest = report.out_dir / "manifest.txt"
    report.manifest.write_text("\n".join(lines) + "\n")


def with_seed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    """Shift every client and workload seed by ``seed``; structure unchanged."""
    if not seed:
        return spec
    clients = {n: dataclasses.replace(c, seed=c.seed + seed) for n, c in spec.clients.items()}
    servers = {n: dataclasses.replace(s, workload=dataclasses.replace(s.workload, seed=s.workload.seed + seed))
               for n, s in spec.servers.items()}
    return dataclasses.replace(spec, clients=clients, servers=servers)


REP_SEED_STRIDE = 1_000_003


def run_repetitions(spec: ScenarioSpec, out_dir: str | Path, repetitions: int | None = None,
                    seed: int = 0) -> list[ScenarioReport]:
    """Run ``spec`` several times (fresh seeds each) and export cross-repetition statistics."""
    reps = repetitions or spec.repetitions
    out = Path(out_dir)
    if reps == 1:
        return [run_scenario(with_seed(spec, seed), out)]
    reports = [run_scenario(with_seed(spec, seed + r * REP_SEED_STRIDE), out / f"rep{r:02d}") for r in range(reps)]
    summaries = [stats.summarize(rp.samples()) for rp in reports if rp.ok]
    summaries = [s for s in summaries if s is not None]
    with open(out / "repetitions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "n", "mean", "ci_low", "ci_high", "min", "q1", "median", "q3", "max"])
        for m in METRICS:
            vals = [s.metric(m) for s in summaries]
            ci = stats.confidence_interval(vals) if len(vals) >= 2 else ("", "")
            box = stats.boxplot_export(summaries, m) if len(summaries) >= stats.MIN_BOXPLOT_REPS else None
            w.writerow([m, len(vals), (sum(vals) / len(vals)) if vals else "", *ci,
                        *(dataclasses.astuple(box) if box else [""] * 5)])
    return reports


# --- sweeps --------------------------------------------------------------------

SWEEP_FIELDS = ["qps", "metric", "mean", "ci_low", "ci_high"]


@dataclass
class SweepReport:
    name: str
    out_dir: Path
    csv_path: Path
    cells: dict[float, list[stats.LatencySummary | None]]
    incomplete: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.incomplete

    def curve(self, metric: str) -> dict[float, float]:
        return {q: r["mean"] for q, r in read_sweep_csv(self.csv_path).get(metric, {}).items()}


def run_sweep(sweep: SweepSpec, out_dir: str | Path, seed: int = 0) -> SweepReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells: dict[float, list] = {}
    incomplete: list[float] = []
    warnings: list[str] = []
    run_rows = []
    for qps in sweep.qps:
        spec = sweep.scenario_for(qps)
        cells[qps] = []
        for rep in range(sweep.repetitions):
            rep_seed = seed + rep * REP_SEED_STRIDE + int(qps * 1000)
            rp = run_scenario(with_seed(spec, rep_seed), out / f"qps{qps:g}" / f"rep{rep:02d}")
            summ = stats.summarize(rp.samples()) if rp.ok else None
            cells[qps].append(summ)
            run_rows.append([qps, rep, rp.status] + ([summ.n, summ.mean_ms, summ.p95_ms, summ.p99_ms]
                                                     if summ else ["", "", "", ""]))
            if not rp.ok:
                warnings.append(f"qps={qps:g} rep={rep}: {'; '.join(rp.errors)}")
                if qps not in incomplete:
                    incomplete.append(qps)
    if sweep.repetitions < 2:
        warnings.append("repetitions < 2: confidence interval columns left empty")
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_FIELDS)
        for qps in sweep.qps:
            good = [s for s in cells[qps] if s is not None]
            for m in METRICS:
                vals = [s.metric(m) for s in good]
                if not vals:
                    w.writerow([f"{qps:g}", m, "", "", ""])
                    continue
                lo, hi = stats.confidence_interval(vals) if len(vals) >= 2 else ("", "")
                w.writerow([f"{qps:g}", m, repr(sum(vals) / len(vals)), repr(lo) if lo != "" else "",
                            repr(hi) if hi != "" else ""])
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["qps", "rep", "status", "n", "mean_ms", "p95_ms", "p99_ms"])
        w.writerows(run_rows)
    manifest = [f"sweep: {sweep.name}", f"base: {sweep.base.source}", f"qps: {','.join(f'{q:g}' for q in sweep.qps)}",
                f"repetitions: {sweep.repetitions}", f"duration_s: {sweep.duration_s}",
                f"status: {'ok' if not incomplete else 'incomplete'}"]
    manifest += [f"incomplete: qps={q:g}" for q in incomplete]
    manifest += [f"warning: {w_}" for w_ in warnings]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    for w_ in warnings:
        log.warning(w_)
    return SweepReport(sweep.name, out, csv_path, cells, incomplete, warnings)


def read_sweep_csv(path: str | Path) -> dict[str, dict[float, dict]]:
    """metric -> qps -> {mean, ci_low, ci_high} (empty cells become None)."""
    path = Path(path)
    if path.is_dir():
        path = path / "sweep.csv"
    out: dict[str, dict[float, dict]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            def num(k):
                return float(row[k]) if row[k] not in ("", None) else None
            out.setdefault(row["metric"], {})[float(row["qps"])] = {
                "mean": num("mean"), "ci_low": num("ci_low"), "ci_high": num("ci_high")}
    return out


def compare_runs(report_a, report_b, metrics=METRICS) -> dict[str, stats.TTestResult]:
    """Welch's t-test per metric over the per-QPS metric vectors of two sweeps."""
    a = read_sweep_csv(report_a.csv_path if isinstance(report_a, SweepReport) else report_a)
    b = read_sweep_csv(report_b.csv_path if isinstance(report_b, SweepReport) else report_b)
    results = {}
    for m in metrics:
        qa, qb = set(a.get(m, {})), set(b.get(m, {}))
        if qa != qb:
            missing_b = sorted(qa - qb)
            missing_a = sorted(qb - qa)
            raise GridMismatch(f"QPS grids differ for {m}: missing in b: {missing_b}, missing in a: {missing_a}")
        grid = sorted(qa)
        xa = [a[m][q]["mean"] for q in grid]
        xb = [b[m][q]["mean"] for q in grid]
        if None in xa or None in xb:
            raise GridMismatch(f"{m}: sweep has empty cells")
        results[m] = stats.welch_t(xa, xb)
    return results


def format_ttest_table(results: dict[str, stats.TTestResult]) -> str:
    labels = {"p95": "95th", "p99": "99th", "mean": "Mean"}
    lines = ["Metric | T-statistic / P-value"]
    for m, r in results.items():
        lines.append(f"{labels.get(m, m)} | {r.cell()}")
    return "\n".join(lines)

