"""Connection-level TCP load balancer.

A client connection is pinned to one backend for its whole life. The backend
is chosen when the client's HELLO frame arrives, then bytes are relayed
unmodified in both directions. REQUEST frames flowing upstream are counted
per connection to feed the measured rates used by the load-aware policy.
"""

from __future__ import annotations

import collections
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import proto
from .client import parse_address

log = logging.getLogger(__name__)

POLICIES = ("round_robin", "load_aware")
RATE_WINDOW_S = 5.0


@dataclass
class BalancerSpec:
    listen_address: str = "127.0.0.1:0"
    backends: list[str] = field(default_factory=list)
    policy: str = "round_robin"
    declared_rates: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.backends:
            raise ValueError("balancer needs at least one backend")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")


class Assigner:
    """Policy state: round-robin cursor and per-backend declared load."""

    def __init__(self, spec: BalancerSpec):
        self.spec = spec
        self._arrivals = 0
        self.declared_load = [0.0] * len(spec.backends)
        self._lock = threading.Lock()

    def assign(self, client_id: int, measured_rates: Sequence[float] | Mapping[int, float] | None = None,
               exclude: frozenset[int] = frozenset()) -> int:
        """Backend index for a new client.

        For ``load_aware`` a backend's load is the sum of declared rates of the
        clients pinned to it plus the measured rate of its undeclared traffic;
        the least loaded backend wins, lowest index on ties.
        """
        k = len(self.spec.backends)
        candidates = [i for i in range(k) if i not in exclude]
        if not candidates:
            raise ConnectionRefusedError("no reachable backend")
        with self._lock:
            if self.spec.policy == "round_robin":
                pos = self._arrivals % k
                self._arrivals += 1
                choice = min(candidates, key=lambda i: (i - pos) % k)
            else:
                measured = [0.0] * k
                if measured_rates is not None:
                    items = measured_rates.items() if isinstance(measured_rates, Mapping) else enumerate(measured_rates)
                    for i, r in items:
                        measured[i] = float(r)
                choice = min(candidates, key=lambda i: (self.declared_load[i] + measured[i], i))
            rate = self.spec.declared_rates.get(client_id)
            if rate is not None:
                self.declared_load[choice] += rate
        return choice

    def release(self, backend: int, client_id: int) -> None:
        rate = self.spec.declared_rates.get(client_id)
        if rate is not None:
            with self._lock:
                self.declared_load[backend] -= rate


def assign(spec: BalancerSpec, hellos: Sequence[proto.Frame],
           measured_rates: Sequence[float] | None = None) -> list[int]:
    """Assignments for a sequence of HELLO frames arriving in order (no departures)."""
    a = Assigner(spec)
    return [a.assign(h.client_id, measured_rates) for h in hellos]


class RateMeter:
    """Sliding-window count of events per second."""

    def __init__(self, window_s: float = RATE_WINDOW_S):
        self.window_ns = int(window_s * 1e9)
        self._events: collections.deque[int] = collections.deque()
        self._lock = threading.Lock()
        self.total = 0

    def add(self, n: int = 1, now_ns: int | None = None) -> None:
        now_ns = time.monotonic_ns() if now_ns is None else now_ns
        with self._lock:
            self._events.extend([now_ns] * n)
            self.total += n
            self._trim(now_ns)

    def _trim(self, now_ns: int) -> None:
        cutoff = now_ns - self.window_ns
        while self._events and self._events[0] < cutoff:
            self._events.popleft()

    def rate(self, now_ns: int | None = None) -> float:
        now_ns = time.monotonic_ns() if now_ns is None else now_ns
        with self._lock:
            self._trim(now_ns)
            return len(self._events) / (self.window_ns / 1e9)


@dataclass
class BackendStats:
    connections: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    frames_up: int = 0
    meter: RateMeter = field(default_factory=RateMeter)


class _FrameCounter:
    """Counts REQUEST frames in a byte stream without buffering payloads."""

    def __init__(self):
        self._header = bytearray()
        self._skip = 0

    def feed(self, data: bytes) -> int:
        count = 0
        view = memoryview(data)
        while view:
            if self._skip:
                n = min(self._skip, len(view))
                self._skip -= n
                view = view[n:]
                continue
            need = proto.HEADER_SIZE - len(self._header)
            self._header += view[:need]
            view = view[need:]
            if len(self._header) == proto.HEADER_SIZE:
                _, _, kind, _, _, plen = proto.HEADER.unpack(self._header)
                if kind == proto.Kind.REQUEST:
                    count += 1
                self._skip = plen
                self._header.clear()
        return count


class Balancer:
    def __init__(self, spec: BalancerSpec, connect_timeout: float = 2.0):
        self.spec = spec
        self.assigner = Assigner(spec)
        self.stats = [BackendStats() for _ in spec.backends]
        self.assignments: list[tuple[int, int]] = []  # (client_id, backend)
        self.connect_timeout = connect_timeout
        self._undeclared: dict[int, list[RateMeter]] = {i: [] for i in range(len(spec.backends))}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        host, port = parse_address(spec.listen_address)
        self._listener = socket.create_server((host, port), reuse_port=False, backlog=128)
        self._listener.settimeout(0.25)
        self.address = "%s:%d" % self._listener.getsockname()[:2]
        self._threads: list[threading.Thread] = []

    def measured_rates(self) -> list[float]:
        """Per-backend REQUEST rate of clients without a declared rate (5 s window)."""
        with self._lock:
            return [sum(m.rate() for m in ms) for _, ms in sorted(self._undeclared.items())]

    def start(self) -> "Balancer":
        t = threading.Thread(target=self._accept_loop, name="balancer-accept", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(2)
        self._listener.close()

    def serve_forever(self) -> None:
        self._stop.wait()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self.proxy, args=(conn,), daemon=True).start()

    def _read_hello(self, conn: socket.socket) -> tuple[proto.Frame, bytes] | None:
        buf = b""
        while True:
            try:
                frame, used = proto.decode(buf)
                return frame, buf
            except proto.IncompleteFrame:
                chunk = conn.recv(65536)
                if not chunk:
                    return None
                buf += chunk

    def proxy(self, conn: socket.socket) -> None:
        """Pin ``conn`` to a backend and relay until either side closes."""
        try:
            got = self._read_hello(conn)
        except (proto.ProtocolError, OSError) as exc:
            log.debug("dropping connection before hello: %s", exc)
            conn.close()
            return
        if got is None:
            conn.close()
            return
        hello, initial = got
        if hello.kind != proto.Kind.CLIENT_HELLO:
            log.warning("first frame was %s, not CLIENT_HELLO", hello.kind.name)
        cid = hello.client_id
        tried: set[int] = set()
        upstream = None
        while upstream is None:
            try:
                idx = self.assigner.assign(cid, self.measured_rates(), frozenset(tried))
            except ConnectionRefusedError:
                log.error("client %d refused: all backends unreachable", cid)
                conn.close()
                return
            try:
                upstream = socket.create_connection(parse_address(self.spec.backends[idx]),
                                                    timeout=self.connect_timeout)
            except OSError as exc:
                log.warning("backend %s unreachable: %s", self.spec.backends[idx], exc)
                self.assigner.release(idx, cid)
                tried.add(idx)
        upstream.settimeout(None)
        upstream.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        stats = self.stats[idx]
        meter = RateMeter()
        with self._lock:
            stats.connections += 1
            self.assignments.append((cid, idx))
            if cid not in self.spec.declared_rates:
                self._undeclared[idx].append(meter)
        log.info("client %d -> backend %d (%s)", cid, idx, self.spec.backends[idx])

        counter = _FrameCounter()

        def count_up(data: bytes) -> None:
            n = counter.feed(data)
            stats.bytes_up += len(data)
            if n:
                stats.frames_up += n
                stats.meter.add(n)
                meter.add(n)

        def count_down(data: bytes) -> None:
            stats.bytes_down += len(data)

        try:
            upstream.sendall(initial)
            count_up(initial)
            down = threading.Thread(target=_relay, args=(upstream, conn, count_down), daemon=True)
            down.start()
            _relay(conn, upstream, count_up)
            down.join()
        finally:
            self.assigner.release(idx, cid)
            with self._lock:
                if meter in self._undeclared[idx]:
                    self._undeclared[idx].remove(meter)
            for s in (conn, upstream):
                try:
                    s.close()
                except OSError:
                    pass


def _relay(src: socket.socket, dst: socket.socket, observe) -> None:
    try:
        while True:
            data = src.recv(65536)
            if not data:
                break
            observe(data)
            dst.sendall(data)
    except OSError:
        pass
    # propagate the close so the peer relay unblocks
    for s, how in ((dst, socket.SHUT_WR), (src, socket.SHUT_RD)):
        try:
            s.shutdown(how)
        except OSError:
            pass


def load_declared_rates(path: str) -> dict[int, float]:
    """``client_id,qps`` per line; blank lines and ``#`` comments ignored."""
    rates = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                cid, qps = (p.strip() for p in line.replace(" ", ",").split(",") if p.strip())
                rates[int(cid)] = float(qps)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'client_id,qps', got {line!r}") from None
    return rates
