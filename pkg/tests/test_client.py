import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailharness import proto
from tailharness.client import (Client, ClientSpec, QpsSchedule, ScheduleError, achieved_rates,
                                current_rate, plan_send_offsets)

LADDER = QpsSchedule.parse("0:100, 10:300, 20:500, 30:600, 40:800, 50:100")


def test_current_rate_ladder():
    expected = {0: 100, 9.999: 100, 10: 300, 25: 500, 30: 600, 45: 800, 50: 100, 59: 100, 1e6: 100}
    for t, q in expected.items():
        assert current_rate(LADDER, t) == q


def test_schedule_parse_and_validation():
    assert LADDER.format() == "0:100, 10:300, 20:500, 30:600, 40:800, 50:100"
    for bad in ("5:100", "0:100, 0:200", "0:0", "0:100, x"):
        with pytest.raises(ScheduleError):
            QpsSchedule.parse(bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.5, 20), st.floats(1, 2000)), min_size=1, max_size=6),
       st.floats(0, 200))
def test_current_rate_is_interval_value(parts, t):
    starts, rates = [0.0], [parts[0][1]]
    for gap, q in parts[1:]:
        starts.append(starts[-1] + gap)
        rates.append(q)
    sched = QpsSchedule(tuple(zip(starts, rates)))
    i = max(k for k, s in enumerate(starts) if s <= t)
    assert current_rate(sched, t) == rates[i]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.integers(0, 2**32))
def test_plan_length_and_determinism(n, seed):
    a = plan_send_offsets(LADDER, n, seed)
    assert len(a) == n
    assert np.array_equal(a, plan_send_offsets(LADDER, n, seed))
    assert (np.diff(a) >= 0).all()


def test_plan_gaps_are_exponential_at_rate():
    offs = plan_send_offsets(QpsSchedule.constant(200), 100_000, 5)
    gaps = np.diff(offs)
    assert gaps.mean() == pytest.approx(1 / 200, rel=0.01)
    # exponential gaps: coefficient of variation close to 1
    assert gaps.std() / gaps.mean() == pytest.approx(1.0, abs=0.03)


def test_plan_tracks_schedule_per_interval():
    offs = plan_send_offsets(LADDER, 24000, 1)
    for start, stop, qps, got in achieved_rates(offs, LADDER, 60):
        assert got == pytest.approx(qps, rel=0.01)


class SlowServer:
    """Accepts one connection, answers each request after ``delay_s``, optionally duplicating one reply."""

    def __init__(self, delay_s=0.0, duplicate_id=None):
        self.sock = socket.create_server(("127.0.0.1", 0))
        self.address = "127.0.0.1:%d" % self.sock.getsockname()[1]
        self.delay_s = delay_s
        self.duplicate_id = duplicate_id
        self.recv_times = []
        threading.Thread(target=self.loop, daemon=True).start()

    def loop(self):
        conn, _ = self.sock.accept()
        buf = proto.FrameBuffer()
        pending = []
        lock = threading.Lock()

        def answer():
            while True:
                with lock:
                    item = pending.pop(0) if pending else None
                if item is None:
                    time.sleep(0.001)
                    continue
                if item == "bye":
                    return
                time.sleep(self.delay_s)
                payload = proto.ResponsePayload(0, 0, 0, 0)
                try:
                    conn.sendall(proto.response(item, payload))
                    if item.request_id == self.duplicate_id:
                        conn.sendall(proto.response(item, payload))
                except OSError:
                    return

        threading.Thread(target=answer, daemon=True).start()
        while True:
            data = conn.recv(65536)
            if not data:
                with lock:
                    pending.append("bye")
                return
            for f in buf.feed(data):
                if f.kind == proto.Kind.REQUEST:
                    self.recv_times.append(time.monotonic_ns())
                    with lock:
                        pending.append(f)


def test_budget_exact_and_log_complete(tmp_path):
    srv = SlowServer()
    log = tmp_path / "c.csv"
    cl = Client(ClientSpec(1, srv.address, 300, QpsSchedule.constant(1000), seed=2), str(log))
    st_ = cl.run()
    assert st_.completed == st_.sent == 300
    assert st_.error is None
    rows = log.read_text().splitlines()
    assert len(rows) == 301
    header = rows[0].split(",")
    send, planned = header.index("send_ns"), header.index("planned_ns")
    # a request is never sent before its planned instant
    assert all(int(r.split(",")[planned]) <= int(r.split(",")[send]) for r in rows[1:])


def test_open_loop_despite_slow_server():
    # server takes 20 ms per reply, sequentially: a closed loop would send ~50/s
    srv = SlowServer(delay_s=0.02)
    cl = Client(ClientSpec(1, srv.address, 100, QpsSchedule.constant(200), seed=3), None, drain_timeout_s=10)
    t0 = time.monotonic_ns()
    cl.run(t0)
    sends = np.array(srv.recv_times)
    span = (sends[-1] - t0) / 1e9
    # 100 requests at 200/s arrive in about half a second regardless of replies
    assert span < 0.8
    assert cl.state.completed == 100


def test_duplicate_response_counted(tmp_path):
    srv = SlowServer(duplicate_id=3)
    cl = Client(ClientSpec(1, srv.address, 20, QpsSchedule.constant(500), seed=4), None)
    cl.run()
    assert cl.state.completed == 20
    assert cl.state.protocol_errors >= 1


def test_connect_failure_is_reported():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    cl = Client(ClientSpec(1, f"127.0.0.1:{port}", 5, QpsSchedule.constant(100)), None)
    with pytest.raises(Exception, match="connect"):
        cl.connect(timeout=1)


def test_spec_validation():
    with pytest.raises(ValueError):
        ClientSpec(1, "127.0.0.1:1", 0, QpsSchedule.constant(1))
    with pytest.raises(ValueError):
        plan_send_offsets(QpsSchedule.constant(1), 0, 0)
