"""Synthetic service-time models and a CPU-burning executor.

Every model is parameterised by its mean service time so that offered load
(``qps * mean``) maps directly onto server utilisation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

DISTRIBUTIONS = ("fixed", "exponential", "lognormal", "zipf-items")


class WorkloadConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    name: str = "fixed"
    mean_service_us: float = 1000.0
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.name not in DISTRIBUTIONS:
            raise WorkloadConfigError(f"unknown distribution {self.name!r}; expected one of {DISTRIBUTIONS}")
        if not self.mean_service_us > 0:
            raise WorkloadConfigError("mean_service_us must be > 0")
        if self.name == "lognormal" and not self.params.get("sigma", 1.0) > 0:
            raise WorkloadConfigError("sigma must be > 0")
        if self.name == "zipf-items":
            if int(self.params.get("item_count", 1000)) < 1:
                raise WorkloadConfigError("item_count must be >= 1")
            if not float(self.params.get("zipf_exponent", 1.0)) > 0:
                raise WorkloadConfigError("zipf_exponent must be > 0")


def zipf_pmf(item_count: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, item_count + 1, dtype=float)
    w = ranks ** -exponent
    return w / w.sum()


class ServiceTimeSampler:
    """Per-connection draw stream; deterministic in (seed, draw index).

    ``draw()`` and ``draw_many(n)`` consume the same underlying stream, so
    ``[draw() for _ in range(n)] == list(draw_many(n))`` for a fresh sampler.

    For ``zipf-items`` an item of rank i is requested with probability
    p_i ~ i^-s, and its service time is proportional to p_i, scaled so that
    the expected service time is ``mean_service_us``: popular items are the
    expensive ones.
    """

    def __init__(self, spec: WorkloadSpec, seed: int | list[int] | None = None):
        self.spec = spec
        self._rng = np.random.Generator(np.random.PCG64(spec.seed if seed is None else seed))
        self._mean = float(spec.mean_service_us)
        if spec.name == "lognormal":
            sigma = float(spec.params.get("sigma", 1.0))
            self._sigma = sigma
            self._mu = math.log(self._mean) - sigma * sigma / 2
        elif spec.name == "zipf-items":
            pmf = zipf_pmf(int(spec.params.get("item_count", 1000)), float(spec.params.get("zipf_exponent", 1.0)))
            self._pmf = pmf
            self._cdf = np.cumsum(pmf)
            self._cdf[-1] = 1.0
            self._item_cost = self._mean * pmf / float(np.dot(pmf, pmf))

    def draw_items(self, n: int) -> np.ndarray:
        """1-based item ranks; only meaningful for zipf-items."""
        u = self._rng.random(n)
        return np.searchsorted(self._cdf, u, side="right") + 1

    def draw_many(self, n: int) -> np.ndarray:
        """Service times in microseconds."""
        name = self.spec.name
        if name == "fixed":
            return np.full(n, self._mean)
        if name == "exponential":
            return -self._mean * np.log1p(-self._rng.random(n))
        if name == "lognormal":
            return np.exp(self._mu + self._sigma * self._rng.standard_normal(n))
        items = self.draw_items(n)
        return self._item_cost[items - 1]

    def draw(self) -> float:
        return float(self.draw_many(1)[0])


def sample_service_time(spec: WorkloadSpec, rng_state: ServiceTimeSampler) -> float:
    """Next service time in microseconds from ``rng_state``."""
    if rng_state.spec is not spec and rng_state.spec != spec:
        raise WorkloadConfigError("sampler was built for a different workload")
    return rng_state.draw()


# --- execution -------------------------------------------------------------

_CHECK_CHUNK = 200  # kernel iterations between CPU-clock reads; replaced by calibrate()


def _kernel(n: int) -> int:
    acc = 0
    for i in range(n):
        acc = (acc + i * i) & 0xFFFF
    return acc


def calibrate(target_check_us: float = 10.0, probe_iters: int = 20000) -> int:
    """Size the spin chunk so a CPU-clock read happens roughly every ``target_check_us``."""
    global _CHECK_CHUNK
    best = math.inf
    for _ in range(3):
        t0 = time.thread_time_ns()
        _kernel(probe_iters)
        best = min(best, time.thread_time_ns() - t0)
    ns_per_iter = max(best / probe_iters, 1e-3)
    _CHECK_CHUNK = max(1, int(target_check_us * 1000 / ns_per_iter))
    return _CHECK_CHUNK


def execute(spec: WorkloadSpec | None, service_time_us: float) -> None:
    """Burn ``service_time_us`` of this thread's CPU time.

    Progress is measured on the thread CPU clock, so when the core is shared
    (other servers, the GIL) the wall-clock duration stretches the way real
    CPU-bound work would.
    """
    if not service_time_us > 0:
        raise ValueError("service time must be > 0")
    deadline = time.thread_time_ns() + int(service_time_us * 1000)
    chunk = _CHECK_CHUNK
    while time.thread_time_ns() < deadline:
        _kernel(chunk)
