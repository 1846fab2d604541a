"""Multi-client, multi-server tail-latency benchmarking harness."""

from .balancer import Assigner, Balancer, BalancerSpec
from .client import Client, ClientSpec, QpsSchedule, current_rate, plan_send_offsets
from .proto import Frame, Kind, ResponsePayload, decode, encode
from .scenario import ScenarioSpec, SweepSpec, parse_scenario, parse_sweep
from .server import Server, ServerSpec
from .stats import LatencySample, LatencySummary, TTestResult, percentile, summarize, welch_t
from .workload import WorkloadSpec

__version__ = "0.1.0"
