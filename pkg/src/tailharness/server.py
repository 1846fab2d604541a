"""Persistent latency-critical server.

The server starts with no clients and never terminates because clients come
and go; only :meth:`Server.stop` (or SIGINT/SIGTERM, or ``stop`` on the admin
port) ends it. One I/O thread accepts connections and reads frames into a
single FIFO queue; ``workers`` threads pull from the queue, burn the sampled
service time and answer.
"""

from __future__ import annotations

import csv
import json
import logging
import queue
import select
import selectors
import signal
import socket
import sys
import threading
import time
from dataclasses import dataclass, field

from . import proto, workload
from .client import parse_address
from .workload import ServiceTimeSampler, WorkloadSpec

log = logging.getLogger(__name__)

EVENT_LOG_FIELDS = ["event", "ts_ns", "client_id", "request_id", "detail"]


class ServerStartupError(RuntimeError):
    pass


@dataclass
class ServerSpec:
    server_id: int = 0
    listen_address: str = "127.0.0.1:0"
    workers: int = 1
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    queue_capacity: int | None = None  # None = unbounded

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.queue_capacity is not None and self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1 or unbounded")


@dataclass
class Connection:
    sock: socket.socket
    peer: str
    buffer: proto.FrameBuffer = field(default_factory=proto.FrameBuffer)
    client_id: int | None = None
    sampler: ServiceTimeSampler | None = None
    alive: bool = True
    write_lock: threading.Lock = field(default_factory=threading.Lock)


@dataclass
class QueuedRequest:
    conn: Connection
    frame: proto.Frame
    recv_ns: int
    service_us: float


@dataclass
class ServerState:
    active_clients: int = 0
    pending_queue: queue.Queue = field(default_factory=queue.Queue)
    served_total: int = 0
    drops: int = 0
    rejected: int = 0
    handshakes_failed: int = 0
    connections: dict = field(default_factory=dict)  # fileno -> Connection


class EventLog:
    """Per-server CSV event stream (hello, bye, disconnect, served, drop)."""

    def __init__(self, path: str | None):
        self._fh = open(path, "w", newline="") if path else None
        self._w = csv.writer(self._fh) if self._fh else None
        self._lock = threading.Lock()
        if self._w:
            self._w.writerow(EVENT_LOG_FIELDS)

    def emit(self, event: str, client_id: int | None = None, request_id: int | None = None,
             detail: str = "") -> None:
        if self._w is None:
            return
        with self._lock:
            self._w.writerow([event, time.monotonic_ns(), "" if client_id is None else client_id,
                              "" if request_id is None else request_id, detail])

    def close(self) -> None:
        if self._fh:
            with self._lock:
                self._fh.close()
                self._fh = self._w = None


class Server:
    def __init__(self, spec: ServerSpec, event_log: str | None = None):
        self.spec = spec
        self.state = ServerState()
        if spec.queue_capacity:
            self.state.pending_queue = queue.Queue(maxsize=spec.queue_capacity)
        self.events = EventLog(event_log)
        self._sel = selectors.DefaultSelector()
        self._stop = threading.Event()
        self._stopped = threading.Event()
        self._stats_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._wake_r, self._wake_w = socket.socketpair()
        self._listener = self._bind(spec.listen_address)
        self.address = "%s:%d" % self._listener.getsockname()[:2]

    @staticmethod
    def _bind(address: str) -> socket.socket:
        host, port = parse_address(address)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, port))
            sock.listen(128)
        except OSError as exc:
            sock.close()
            raise ServerStartupError(f"cannot listen on {address}: {exc}") from exc
        sock.setblocking(False)
        return sock

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "Server":
        workload.calibrate()
        self._sel.register(self._listener, selectors.EVENT_READ, None)
        self._sel.register(self._wake_r, selectors.EVENT_READ, "wake")
        io = threading.Thread(target=self._io_loop, name=f"server{self.spec.server_id}-io", daemon=True)
        self._threads.append(io)
        for i in range(self.spec.workers):
            self._threads.append(threading.Thread(target=self._worker, daemon=True,
                                                  name=f"server{self.spec.server_id}-w{i}"))
        for t in self._threads:
            t.start()
        log.info("server %d listening on %s", self.spec.server_id, self.address)
        return self

    def stop(self, timeout: float = 5.0) -> None:
        """Stop serving; returns once threads are joined and the event log is closed."""
        if self._stop.is_set():
            self._stopped.wait(timeout)
            return
        self._stop.set()
        try:
            self._wake_w.send(b"x")
        except OSError:
            pass
        for _ in range(self.spec.workers):
            try:
                self.state.pending_queue.put_nowait(None)
            except queue.Full:
                pass
        for t in self._threads:
            t.join(timeout)
        for conn in list(self.state.connections.values()):
            self._close_conn(conn, "server stopping")
        self._sel.close()
        self._listener.close()
        self._wake_r.close()
        self._wake_w.close()
        self.events.close()
        self._stopped.set()

    def serve_forever(self) -> None:
        """Block until stopped; the process stays up regardless of client count."""
        self._stop.wait()

    @property
    def stopped(self) -> bool:
        """True once shutdown has completed."""
        return self._stopped.is_set()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def counters(self) -> dict:
        st = self.state
        with self._stats_lock:
            return {"server_id": self.spec.server_id, "active_clients": st.active_clients,
                    "served_total": st.served_total, "drops": st.drops, "queued": st.pending_queue.qsize(),
                    "rejected": st.rejected, "handshakes_failed": st.handshakes_failed}

    # -- accept / read path ---------------------------------------------------

    def check_new_clients(self) -> int:
        """Admit every pending connection attempt without blocking; returns how many."""
        admitted = 0
        while True:
            try:
                sock, peer = self._listener.accept()
            except (BlockingIOError, InterruptedError):
                return admitted
            except OSError:
                return admitted
            sock.setblocking(False)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = Connection(sock, "%s:%d" % peer[:2])
            self.state.connections[sock.fileno()] = conn
            self._sel.register(sock, selectors.EVENT_READ, conn)
            admitted += 1

    def _io_loop(self) -> None:
        while not self._stop.is_set():
            try:
                # blocking select: zero CPU while idle
                events = self._sel.select(timeout=None)
            except (OSError, ValueError):
                if self._stop.is_set():
                    return
                raise
            for key, _ in events:
                if key.fileobj is self._listener:
                    self.check_new_clients()
                elif key.data == "wake":
                    return
                else:
                    self._read(key.data)

    def _read(self, conn: Connection) -> None:
        try:
            data = conn.sock.recv(65536)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            data = b""
        now = time.monotonic_ns()
        if not data:
            self._close_conn(conn, "disconnect")
            return
        try:
            frames = conn.buffer.feed(data)
        except proto.ProtocolError as exc:
            self._close_conn(conn, f"protocol error: {exc}")
            return
        for frame in frames:
            self._handle(conn, frame, now)

    def _handle(self, conn: Connection, frame: proto.Frame, now: int) -> None:
        st = self.state
        if frame.kind == proto.Kind.CLIENT_HELLO:
            if conn.client_id is None:
                conn.client_id = frame.client_id
                wl = self.spec.workload
                # per-connection stream: deterministic in (workload seed, client id)
                conn.sampler = ServiceTimeSampler(wl, seed=[wl.seed, frame.client_id])
                with self._stats_lock:
                    st.active_clients += 1
                self.events.emit("hello", frame.client_id, detail=conn.peer)
        elif frame.kind == proto.Kind.CLIENT_BYE:
            self._close_conn(conn, "bye")
        elif frame.kind == proto.Kind.REQUEST:
            if conn.sampler is None:
                # request without HELLO (e.g. a readiness probe)
                conn.sampler = ServiceTimeSampler(self.spec.workload)
            item = QueuedRequest(conn, frame, now, conn.sampler.draw())
            try:
                st.pending_queue.put_nowait(item)
            except queue.Full:
                with self._stats_lock:
                    st.rejected += 1
                self.events.emit("reject", frame.client_id, frame.request_id, "queue full")
        else:
            self._close_conn(conn, f"unexpected {frame.kind.name} frame")

    def _close_conn(self, conn: Connection, reason: str) -> None:
        if not conn.alive:
            return
        conn.alive = False
        fd = conn.sock.fileno()
        try:
            self._sel.unregister(conn.sock)
        except (KeyError, ValueError, OSError):
            pass
        self.state.connections.pop(fd, None)
        with conn.write_lock:
            try:
                conn.sock.close()
            except OSError:
                pass
        if conn.client_id is not None:
            with self._stats_lock:
                self.state.active_clients -= 1
            self.events.emit("bye" if reason == "bye" else "disconnect", conn.client_id, detail=reason)
        else:
            with self._stats_lock:
                self.state.handshakes_failed += 1
            log.debug("dropping connection %s before handshake: %s", conn.peer, reason)

    # -- worker path ----------------------------------------------------------

    def recv_req(self, timeout: float | None = None) -> QueuedRequest | None:
        """Next queued request in arrival order; blocks (idle) while there is none.

        Returns None once the server is stopping or after ``timeout``.
        """
        try:
            item = self.state.pending_queue.get(timeout=timeout)
        except queue.Empty:
            return None
        return item

    def send_resp(self, item: QueuedRequest, timings: proto.ResponsePayload) -> bool:
        conn = item.conn
        data = proto.response(item.frame, timings)
        with conn.write_lock:
            ok = conn.alive
            if ok:
                try:
                    _send_nonblocking(conn.sock, data)
                except OSError:
                    ok = False
        with self._stats_lock:
            if ok:
                self.state.served_total += 1
            else:
                self.state.drops += 1
        self.events.emit("served" if ok else "drop", item.frame.client_id, item.frame.request_id)
        return ok

    def _worker(self) -> None:
        wl = self.spec.workload
        sid = self.spec.server_id
        while True:
            item = self.recv_req()
            if item is None or self._stop.is_set():
                return
            start = time.monotonic_ns()
            workload.execute(wl, item.service_us)
            end = time.monotonic_ns()
            self.send_resp(item, proto.ResponsePayload(item.recv_ns, start, end, sid))


def _send_nonblocking(sock: socket.socket, data: bytes, timeout: float = 5.0) -> None:
    view = memoryview(data)
    while view:
        try:
            view = view[sock.send(view):]
        except BlockingIOError:
            if not select.select([], [sock], [], timeout)[1]:
                raise TimeoutError("peer stopped reading")


# --- admin channel -----------------------------------------------------------

def serve_admin(server: Server, address: str) -> threading.Thread:
    """Line protocol on a local TCP port: ``stop`` or ``stats``."""
    sock = Server._bind(address)
    sock.setblocking(True)
    sock.settimeout(0.5)

    def loop():
        with sock:
            while not server.stopped:
                try:
                    conn, _ = sock.accept()
                except socket.timeout:
                    continue
                except OSError:
                    return
                with conn:
                    line = conn.makefile().readline().strip()
                    if line == "stop":
                        conn.sendall(b"ok\n")
                        server.stop()
                        return
                    if line == "stats":
                        conn.sendall((json.dumps(server.counters()) + "\n").encode())
                    else:
                        conn.sendall(b"error: unknown command\n")

    t = threading.Thread(target=loop, name="admin", daemon=True)
    t.start()
    return t


def run(spec: ServerSpec, event_log: str | None = None, admin: str | None = None,
        ready_stream=None) -> None:
    """Serve until SIGINT/SIGTERM or an admin ``stop``."""
    # the spinning worker holds the GIL; switch often so the I/O thread keeps up
    sys.setswitchinterval(0.0002)
    server = Server(spec, event_log).start()
    if admin:
        serve_admin(server, admin)

    def on_signal(signum, frame):
        threading.Thread(target=server.stop, daemon=True).start()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    if ready_stream is not None:
        print(f"LISTENING {server.address}", file=ready_stream, flush=True)
    while not server.stopped:
        server._stopped.wait(0.5)
    server.stop()
    log.info("server %d stopped: %s", spec.server_id, server.counters())
