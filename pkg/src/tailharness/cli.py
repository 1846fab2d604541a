"""Command line entry point.

Experiment commands: ``run``, ``sweep``, ``compare``, ``stats``.
Component commands (what ``run`` launches as child processes): ``serve``,
``client``, ``balance``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path

from . import runner, stats
from .balancer import POLICIES, Balancer, BalancerSpec, load_declared_rates
from .client import Client, ClientSpec, QpsSchedule
from .scenario import ScenarioError, parse_scenario, parse_sweep
from .server import ServerSpec, ServerStartupError
from .server import run as run_server
from .workload import DISTRIBUTIONS, WorkloadSpec


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.add_argument("--seed", type=int, default=0, help="offset added to every client/workload seed")
    p.add_argument("--repetitions", type=int, default=None, help="override the file's repetition count")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tailharness", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario file")
    p.add_argument("scenario")
    _common(p)
    p.add_argument("--policy", choices=POLICIES, help="override the balancer policy")
    p.add_argument("--mode", choices=("process", "inprocess"), help="override the scenario's mode")
    p.add_argument("--exclude-warmup", type=float, metavar="SECONDS", default=None,
                   help="drop each client's first SECONDS of samples from summaries")

    p = sub.add_parser("sweep", help="run a QPS sweep file")
    p.add_argument("sweep")
    _common(p)

    p = sub.add_parser("compare", help="Welch's t-test between two sweep reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out", default=None, help="write the t-test CSV here")
    p.add_argument("--metrics", default="mean,p95,p99")

    p = sub.add_parser("stats", help="summarize client CSV logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--window-s", type=float, default=1.0)
    p.add_argument("--out", default=None, help="write the summary CSV here (default: stdout)")

    p = sub.add_parser("serve", help="run one persistent server")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--server-id", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--workload", choices=DISTRIBUTIONS, default="fixed")
    p.add_argument("--mean-service-us", type=float, default=1000.0)
    p.add_argument("--sigma", type=float)
    p.add_argument("--item-count", type=int)
    p.add_argument("--zipf-exponent", type=float)
    p.add_argument("--workload-seed", type=int, default=0)
    p.add_argument("--queue-capacity", default="unbounded")
    p.add_argument("--event-log")
    p.add_argument("--admin", help="host:port for the stop/stats admin channel")

    p = sub.add_parser("client", help="run one open-loop client")
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--total-requests", type=int, required=True)
    p.add_argument("--schedule", required=True, help='e.g. "0:100, 10:300"')
    p.add_argument("--start-delay-s", type=float, default=0.0)
    p.add_argument("--sender-threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", required=True)
    p.add_argument("--status", help="write a JSON status record here on exit")
    p.add_argument("--wait-go", action="store_true",
                   help="print READY, then wait for 'GO <epoch_ns>' on stdin")

    p = sub.add_parser("balance", help="run the connection-level load balancer")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--backend", action="append", required=True)
    p.add_argument("--policy", choices=POLICIES, default="round_robin")
    p.add_argument("--declared-rates", help="file of 'client_id,qps' lines")
    return ap


def cmd_run(args) -> int:
    spec = parse_scenario(args.scenario)
    if args.policy:
        if spec.balancer is None:
            raise ScenarioError("--policy given but the scenario has no balancer", args.scenario)
        spec = dataclasses.replace(spec, balancer=dataclasses.replace(spec.balancer, policy=args.policy))
    if args.mode:
        spec = dataclasses.replace(spec, mode=args.mode)
    if args.exclude_warmup is not None:
        spec = dataclasses.replace(spec, warmup_s=args.exclude_warmup)
    reports = runner.run_repetitions(spec, args.out, args.repetitions, args.seed)
    for rp in reports:
        print(f"{rp.out_dir}: {rp.status}")
        for e in rp.errors:
            print(f"  error: {e}")
    return 0 if all(rp.ok for rp in reports) else 1


def cmd_sweep(args) -> int:
    sweep = parse_sweep(args.sweep)
    if args.repetitions:
        sweep = dataclasses.replace(sweep, repetitions=args.repetitions)
    rp = runner.run_sweep(sweep, args.out, args.seed)
    print(rp.csv_path.read_text(), end="")
    return 0 if rp.ok else 1


def cmd_compare(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    results = runner.compare_runs(args.report_a, args.report_b, metrics)
    print(runner.format_ttest_table(results))
    if args.out:
        stats.write_ttest_csv(args.out, results)
    return 0


def cmd_stats(args) -> int:
    rows = []
    logs = [Path(p) for p in args.logs]
    epoch = None
    for p in logs:
        first = stats.read_client_log(p, 0)
        if first:
            t0 = min(int(s.send_offset_s * 1e9) for s in first)
            epoch = t0 if epoch is None else min(epoch, t0)
    every = []
    for i, p in enumerate(logs):
        samples = stats.read_client_log(p, epoch, client_id=i)
        every.extend(samples)
        scope = f"log:{p.stem}"
        rows.append(stats.summary_row(scope, None, None, stats.summarize(samples)))
        for lo, hi, s in stats.windows(samples, args.window_s):
            rows.append(stats.summary_row(scope, lo, hi, s))
    rows.append(stats.summary_row("all", None, None, stats.summarize(every)))
    if args.out:
        stats.write_summary_csv(args.out, rows)
    else:
        import csv

        w = csv.DictWriter(sys.stdout, fieldnames=stats.SUMMARY_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return 0


def cmd_serve(args) -> int:
    params = {k: getattr(args, k) for k in ("sigma", "item_count", "zipf_exponent") if getattr(args, k) is not None}
    spec = ServerSpec(
        server_id=args.server_id,
        listen_address=args.listen,
        workers=args.workers,
        workload=WorkloadSpec(args.workload, args.mean_service_us, params, args.workload_seed),
        queue_capacity=None if args.queue_capacity == "unbounded" else int(args.queue_capacity),
    )
    try:
        run_server(spec, args.event_log, args.admin, ready_stream=sys.stdout)
    except ServerStartupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_client(args) -> int:
    spec = ClientSpec(args.client_id, args.target, args.total_requests, QpsSchedule.parse(args.schedule),
                      args.start_delay_s, args.sender_threads, args.seed)
    cl = Client(spec, args.log)
    epoch = None
    if args.wait_go:
        print("READY", flush=True)
        line = sys.stdin.readline().split()
        if len(line) != 2 or line[0] != "GO":
            print("error: expected 'GO <epoch_ns>'", file=sys.stderr)
            return 2
        epoch = int(line[1])
    else:
        epoch = time.monotonic_ns()
    error = None
    try:
        cl.run(epoch)
    except Exception as exc:
        error = f"{type(exc).__name__}: {exc}"
        cl.flush_log()
    status = runner.client_status(cl, epoch, error)
    if args.status:
        Path(args.status).write_text(json.dumps(status, indent=1))
    return 0 if not status["error"] else 1


def cmd_balance(args) -> int:
    rates = load_declared_rates(args.declared_rates) if args.declared_rates else {}
    bal = Balancer(BalancerSpec(args.listen, args.backend, args.policy, rates)).start()
    print(f"LISTENING {bal.address}", flush=True)
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *a: done.set())
    signal.signal(signal.SIGINT, lambda *a: done.set())
    while not done.wait(0.5):
        pass
    bal.stop()
    for cid, idx in bal.assignments:
        logging.getLogger("tailharness.balancer").info("assignment client=%d backend=%d", cid, idx)
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "compare": cmd_compare, "stats": cmd_stats,
            "serve": cmd_serve, "client": cmd_client, "balance": cmd_balance}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, runner.GridMismatch, stats.StatsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
