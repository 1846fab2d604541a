import statistics
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailharness import workload
from tailharness.workload import ServiceTimeSampler, WorkloadConfigError, WorkloadSpec


def test_fixed_is_constant():
    s = ServiceTimeSampler(WorkloadSpec("fixed", 1000.0))
    assert set(s.draw_many(500)) == {1000.0}
    assert workload.sample_service_time(s.spec, s) == 1000.0


def test_exponential_mean():
    s = ServiceTimeSampler(WorkloadSpec("exponential", 500.0, seed=1))
    xs = s.draw_many(1_000_000)
    assert xs.mean() == pytest.approx(500.0, rel=0.01)
    assert (xs > 0).all()


def test_lognormal_mean():
    s = ServiceTimeSampler(WorkloadSpec("lognormal", 300.0, {"sigma": 0.5}, seed=2))
    assert s.draw_many(1_000_000).mean() == pytest.approx(300.0, rel=0.01)


def test_zipf_item_frequencies():
    spec = WorkloadSpec("zipf-items", 100.0, {"item_count": 100, "zipf_exponent": 1.0}, seed=3)
    items = ServiceTimeSampler(spec).draw_items(1_000_000)
    h = sum(1 / k for k in range(1, 101))
    counts = np.bincount(items, minlength=101)
    for i in range(1, 11):
        expected = (1 / i) / h
        assert counts[i] / len(items) == pytest.approx(expected, rel=0.02)


def test_zipf_service_mean():
    spec = WorkloadSpec("zipf-items", 250.0, {"item_count": 1000, "zipf_exponent": 0.9}, seed=4)
    assert ServiceTimeSampler(spec).draw_many(1_000_000).mean() == pytest.approx(250.0, rel=0.01)


@pytest.mark.parametrize("name", workload.DISTRIBUTIONS)
def test_draw_matches_draw_many(name):
    spec = WorkloadSpec(name, 400.0, seed=9)
    a = [ServiceTimeSampler(spec).draw() for _ in range(1)]
    one = ServiceTimeSampler(spec)
    singles = [one.draw() for _ in range(200)]
    assert singles == list(ServiceTimeSampler(spec).draw_many(200))
    assert a[0] == singles[0]


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(workload.DISTRIBUTIONS), st.integers(0, 2**32), st.floats(1, 1e5))
def test_deterministic_in_seed(name, seed, mean):
    spec = WorkloadSpec(name, mean, seed=seed)
    a = ServiceTimeSampler(spec).draw_many(50)
    b = ServiceTimeSampler(spec).draw_many(50)
    assert np.array_equal(a, b)
    assert (a > 0).all()


def test_invalid_configs():
    with pytest.raises(WorkloadConfigError):
        WorkloadSpec("pareto", 100.0)
    with pytest.raises(WorkloadConfigError):
        WorkloadSpec("fixed", 0.0)
    with pytest.raises(WorkloadConfigError):
        WorkloadSpec("lognormal", 10.0, {"sigma": -1})
    with pytest.raises(WorkloadConfigError):
        WorkloadSpec("zipf-items", 10.0, {"item_count": 0})


def test_execute_rejects_nonpositive():
    with pytest.raises(ValueError):
        workload.execute(WorkloadSpec(), 0)
    with pytest.raises(ValueError):
        workload.execute(WorkloadSpec(), -5)


def test_execute_duration():
    workload.calibrate()
    cpu, wall = [], []
    for _ in range(41):
        c0, w0 = time.thread_time_ns(), time.perf_counter_ns()
        workload.execute(None, 1000.0)
        cpu.append(time.thread_time_ns() - c0)
        wall.append(time.perf_counter_ns() - w0)
    assert statistics.median(cpu) == pytest.approx(1_000_000, rel=0.05)
    assert statistics.median(wall) == pytest.approx(1_000_000, rel=0.05)
