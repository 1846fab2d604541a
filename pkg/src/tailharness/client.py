"""Open-loop load generator.

Each client owns its request budget and a piecewise-constant QPS schedule.
Send instants are planned up front from the schedule and seed, so server
slowness can never throttle the offered load.
"""

from __future__ import annotations

import bisect
import csv
import logging
import math
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import proto

log = logging.getLogger(__name__)

LOG_FIELDS = ["request_id", "send_ns", "recv_ns", "sojourn_ns", "server_id",
              "server_recv_ns", "service_start_ns", "service_end_ns", "planned_ns"]


class ScheduleError(ValueError):
    pass


class TransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class QpsSchedule:
    """Ordered (start_offset_s, qps) intervals; the last one never ends."""

    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        iv = tuple((float(a), float(q)) for a, q in self.intervals)
        object.__setattr__(self, "intervals", iv)
        if not iv:
            raise ScheduleError("schedule needs at least one interval")
        if iv[0][0] != 0.0:
            raise ScheduleError("first interval must start at 0")
        for (a, _), (b, _) in zip(iv, iv[1:]):
            if not b > a:
                raise ScheduleError(f"interval starts must be strictly increasing ({a} then {b})")
        for _, q in iv:
            if not q > 0:
                raise ScheduleError(f"qps must be > 0, got {q}")

    @classmethod
    def constant(cls, qps: float) -> "QpsSchedule":
        return cls(((0.0, qps),))

    @classmethod
    def parse(cls, text: str) -> "QpsSchedule":
        """Parse ``"0:100, 10:300, 20:500"``."""
        out = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            try:
                start, qps = part.split(":")
                out.append((float(start), float(qps)))
            except ValueError:
                raise ScheduleError(f"bad schedule entry {part!r}; expected start_s:qps") from None
        return cls(tuple(out))

    def format(self) -> str:
        return ", ".join(f"{a:g}:{q:g}" for a, q in self.intervals)

    def __iter__(self):
        return iter(self.intervals)


def current_rate(schedule: QpsSchedule, elapsed_s: float) -> float:
    if elapsed_s < 0:
        raise ValueError("elapsed_s must be >= 0")
    starts = [a for a, _ in schedule.intervals]
    return schedule.intervals[bisect.bisect_right(starts, elapsed_s) - 1][1]


def _blocks(schedule: QpsSchedule, block_s: float) -> Iterator[tuple[float, float, float]]:
    """(start, end, qps) blocks no longer than ``block_s``, never straddling an interval edge."""
    iv = schedule.intervals
    for i, (start, qps) in enumerate(iv):
        end = iv[i + 1][0] if i + 1 < len(iv) else math.inf
        t = start
        while t < end:
            nxt = min(end, t + block_s)
            yield t, nxt, qps
            t = nxt


def plan_send_offsets(schedule: QpsSchedule, total_requests: int, seed: int,
                      block_s: float = 1.0) -> np.ndarray:
    """Planned send offsets in seconds from client start, ``total_requests`` long.

    Arrivals are a Poisson process at the scheduled rate, conditioned on its
    count in each ``block_s`` block: the block receives the number of arrivals
    its integrated rate dictates (fractional remainders carried forward), and
    those arrivals sit at uniformly random positions inside it. Inter-arrival
    gaps are exponential at the local rate while per-interval counts track the
    schedule exactly, so achieved rate does not wander with sampling noise.
    """
    if total_requests < 1:
        raise ValueError("total_requests must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    out: list[np.ndarray] = []
    have = 0
    expected = 0.0
    for start, end, qps in _blocks(schedule, block_s):
        before = math.floor(expected + 1e-9)
        expected += qps * (end - start)
        n = math.floor(expected + 1e-9) - before
        if n > 0:
            # a block cut short by the budget keeps its earliest arrivals
            pts = np.sort(start + (end - start) * rng.random(n))[:total_requests - have]
            out.append(pts)
            have += len(pts)
        if have >= total_requests:
            break
    return np.concatenate(out)


@dataclass
class ClientSpec:
    client_id: int
    target_address: str
    total_requests: int
    schedule: QpsSchedule
    start_delay_s: float = 0.0
    sender_threads: int = 1
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.total_requests < 1:
            raise ValueError("total_requests must be >= 1")
        if self.start_delay_s < 0:
            raise ValueError("start_delay_s must be >= 0")
        if self.sender_threads < 1:
            raise ValueError("sender_threads must be >= 1")


@dataclass
class LogEntry:
    request_id: int
    send_ns: int
    recv_ns: int
    sojourn_ns: int
    server_id: int
    server_recv_ns: int
    service_start_ns: int
    service_end_ns: int
    planned_ns: int

    def row(self) -> list[int]:
        return [self.request_id, self.send_ns, self.recv_ns, self.sojourn_ns, self.server_id,
                self.server_recv_ns, self.service_start_ns, self.service_end_ns, self.planned_ns]


@dataclass
class ClientState:
    outstanding: dict[int, tuple[int, int]] = field(default_factory=dict)  # request_id -> (send_ns, planned_ns)
    log: list[LogEntry] = field(default_factory=list)
    completed: int = 0
    sent: int = 0
    protocol_errors: int = 0
    late_sends: int = 0
    max_send_lag_ns: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)
    done: threading.Event = field(default_factory=threading.Event)
    error: str | None = None
    start_ns: int = 0
    end_ns: int = 0


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}; expected host:port")
    return host, int(port)


# late by more than this counts as a late send
LATE_NS = 1_000_000
CONNECT_LEAD_NS = 50_000_000


class Client:
    """One client connection: planner, sender thread(s), receiver thread."""

    def __init__(self, spec: ClientSpec, log_path: str | None = None, drain_timeout_s: float = 120.0):
        self.spec = spec
        self.log_path = log_path
        self.drain_timeout_s = drain_timeout_s
        self.state = ClientState()
        self.plan = plan_send_offsets(spec.schedule, spec.total_requests, spec.seed)
        self._sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._closed = False

    # -- protocol operations ------------------------------------------------

    def start_req(self, request_id: int, planned_ns: int) -> None:
        """Send request ``request_id`` at (or as soon as possible after) ``planned_ns``."""
        delay = planned_ns - time.monotonic_ns()
        if delay > 0:
            time.sleep(delay / 1e9)
        data = proto.request(self.spec.client_id, request_id)
        with self._send_lock:
            if self._closed:
                return
            send_ns = time.monotonic_ns()
            with self.state.lock:
                self.state.outstanding[request_id] = (send_ns, planned_ns)
                self.state.sent += 1
                lag = send_ns - planned_ns
                if lag > LATE_NS:
                    self.state.late_sends += 1
                if lag > self.state.max_send_lag_ns:
                    self.state.max_send_lag_ns = lag
            self._sock.sendall(data)

    def fini_req(self, frame: proto.Frame, recv_ns: int | None = None) -> LogEntry | None:
        """Record a response; closes the client once the budget is met."""
        recv_ns = time.monotonic_ns() if recv_ns is None else recv_ns
        st = self.state
        with st.lock:
            sent = st.outstanding.pop(frame.request_id, None)
            if sent is None or frame.kind != proto.Kind.RESPONSE:
                st.protocol_errors += 1
                log.warning("client %d: unexpected response id %d", self.spec.client_id, frame.request_id)
                return None
            send_ns, planned_ns = sent
            timings = proto.ResponsePayload.unpack(frame.payload)
            entry = LogEntry(frame.request_id, send_ns, recv_ns, recv_ns - send_ns, timings.server_id,
                             timings.server_recv_ns, timings.service_start_ns, timings.service_end_ns,
                             planned_ns)
            st.log.append(entry)
            st.completed += 1
            finished = st.completed >= self.spec.total_requests
        if finished:
            self._finish()
        return entry

    # -- lifecycle ----------------------------------------------------------

    def connect(self, timeout: float = 10.0) -> None:
        try:
            self._sock = socket.create_connection(parse_address(self.spec.target_address), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"connect to {self.spec.target_address} failed: {exc}") from exc
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.sendall(proto.hello(self.spec.client_id))

    def _finish(self) -> None:
        with self._send_lock:
            if self._closed:
                return
            self._closed = True
            self.state.end_ns = time.monotonic_ns()
            try:
                self._sock.sendall(proto.bye(self.spec.client_id))
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
        self.flush_log()
        self.state.done.set()

    def _abort(self, message: str) -> None:
        if self.state.error is None and not self.state.done.is_set():
            self.state.error = message
            log.error("client %d aborted: %s", self.spec.client_id, message)
        with self._send_lock:
            if not self._closed:
                self._closed = True
                self.state.end_ns = time.monotonic_ns()
                try:
                    self._sock.close()
                except OSError:
                    pass
        self.flush_log()
        self.state.done.set()

    def flush_log(self) -> None:
        if not self.log_path:
            return
        with self.state.lock:
            rows = [e.row() for e in self.state.log]
        with open(self.log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            w.writerows(rows)

    def _receiver(self) -> None:
        buf = proto.FrameBuffer()
        sock = self._sock
        try:
            while not self.state.done.is_set():
                data = sock.recv(65536)
                recv_ns = time.monotonic_ns()
                if not data:
                    if not self.state.done.is_set():
                        self._abort("connection closed by peer before budget was met")
                    return
                for frame in buf.feed(data):
                    self.fini_req(frame, recv_ns)
        except proto.ProtocolError as exc:
            self._abort(f"protocol error: {exc}")
        except OSError as exc:
            if not self.state.done.is_set():
                self._abort(f"transport error: {exc}")

    def _sender(self, index: int, start_ns: int) -> None:
        plan = self.plan
        step = self.spec.sender_threads
        try:
            for rid in range(index, len(plan), step):
                if self.state.done.is_set():
                    return
                self.start_req(rid, start_ns + int(plan[rid] * 1e9))
        except OSError as exc:
            self._abort(f"transport error: {exc}")

    def run(self, start_ns: int | None = None) -> ClientState:
        """Connect, wait for the start instant, drive the plan, block until done."""
        if start_ns is None:
            start_ns = time.monotonic_ns()
        start_ns += int(self.spec.start_delay_s * 1e9)
        if self._sock is None:
            # connect just before the first send so the server sees the client arrive on time
            wait = start_ns - CONNECT_LEAD_NS - time.monotonic_ns()
            if wait > 0:
                time.sleep(wait / 1e9)
            self.connect()
        self.state.start_ns = start_ns
        recv = threading.Thread(target=self._receiver, name=f"client{self.spec.client_id}-recv", daemon=True)
        recv.start()
        senders = [threading.Thread(target=self._sender, args=(i, start_ns), daemon=True,
                                    name=f"client{self.spec.client_id}-send{i}")
                   for i in range(self.spec.sender_threads)]
        for t in senders:
            t.start()
        for t in senders:
            t.join()
        if not self.state.done.wait(self.drain_timeout_s):
            self._abort(f"timed out waiting for {len(self.state.outstanding)} responses")
        recv.join(timeout=5)
        return self.state


def achieved_rates(send_offsets_s: Sequence[float], schedule: QpsSchedule,
                   end_s: float) -> list[tuple[float, float, float, float]]:
    """(start, end, scheduled qps, achieved qps) per schedule interval up to ``end_s``."""
    offs = np.sort(np.asarray(send_offsets_s, dtype=float))
    out = []
    iv = schedule.intervals
    for i, (start, qps) in enumerate(iv):
        stop = iv[i + 1][0] if i + 1 < len(iv) else end_s
        if stop <= start:
            continue
        n = np.searchsorted(offs, stop, side="left") - np.searchsorted(offs, start, side="left")
        out.append((start, stop, qps, float(n) / (stop - start)))
    return out
