"""Scenario and sweep files.

Both are plain text: ``[section]`` headers followed by ``key = value`` lines,
``#`` starts a comment. A scenario has one ``[scenario]`` section, one or more
``[server NAME]`` sections, an optional ``[balancer]`` section and one or more
``[client NAME]`` sections. Clients name their ``target``: a server or
``balancer``. See ``docs/scenario-format.md`` for every key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .balancer import POLICIES, BalancerSpec
from .client import ClientSpec, QpsSchedule, ScheduleError
from .server import ServerSpec
from .workload import WorkloadConfigError, WorkloadSpec


class ScenarioError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = f"{path or '<scenario>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


@dataclass
class ScenarioSpec:
    name: str
    servers: dict[str, ServerSpec]
    clients: dict[str, ClientSpec]  # ClientSpec.target_address holds the target's name
    balancer: BalancerSpec | None = None  # backends hold server names
    repetitions: int = 13
    window_s: float = 1.0
    warmup_s: float = 0.0
    mode: str = "process"
    source: str | None = None

    def client_targets(self) -> dict[str, str]:
        return {n: c.target_address for n, c in self.clients.items()}


@dataclass
class SweepSpec:
    base: ScenarioSpec
    qps: list[float]
    repetitions: int
    duration_s: float | None = None
    name: str = "sweep"

    def scenario_for(self, qps: float) -> ScenarioSpec:
        """The base scenario with every client set to a constant ``qps``."""
        clients = {}
        for n, c in self.base.clients.items():
            total = c.total_requests if self.duration_s is None else max(1, round(qps * self.duration_s))
            clients[n] = dataclasses.replace(c, schedule=QpsSchedule.constant(qps), total_requests=total)
        bal = self.base.balancer
        if bal is not None and bal.declared_rates:
            bal = dataclasses.replace(bal, declared_rates={c.client_id: qps for c in clients.values()})
        return dataclasses.replace(self.base, clients=clients, balancer=bal, name=f"{self.base.name}@{qps:g}")


# --- generic section parsing ---------------------------------------------------

@dataclass
class _Section:
    kind: str
    name: str | None
    line: int
    values: dict[str, tuple[str, int]] = field(default_factory=dict)


def _read_sections(text: str, path: str | None) -> list[_Section]:
    sections: list[_Section] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioError(f"malformed section header {raw.strip()!r}", path, lineno)
            parts = line[1:-1].split()
            if not parts or len(parts) > 2:
                raise ScenarioError(f"malformed section header {raw.strip()!r}", path, lineno)
            sections.append(_Section(parts[0].lower(), parts[1] if len(parts) == 2 else None, lineno))
            continue
        if "=" not in line:
            raise ScenarioError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        if not sections:
            raise ScenarioError("key outside of any section", path, lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        sec = sections[-1]
        if key in sec.values:
            raise ScenarioError(f"duplicate key {key!r}", path, lineno)
        sec.values[key] = (value, lineno)
    return sections


class _Reader:
    """Typed access to one section's values with location-aware errors."""

    def __init__(self, sec: _Section, allowed: set[str], path: str | None):
        self.sec, self.path = sec, path
        for key, (_, line) in sec.values.items():
            if key not in allowed:
                raise ScenarioError(f"unknown key {key!r} in [{sec.kind}] (allowed: {', '.join(sorted(allowed))})",
                                    path, line)

    def has(self, key: str) -> bool:
        return key in self.sec.values

    def line(self, key: str) -> int:
        return self.sec.values[key][1] if key in self.sec.values else self.sec.line

    def error(self, key: str, msg: str) -> ScenarioError:
        return ScenarioError(msg, self.path, self.line(key))

    def str(self, key: str, default=None):
        if key not in self.sec.values:
            if default is None:
                raise ScenarioError(f"missing required key {key!r} in [{self.sec.kind}]", self.path, self.sec.line)
            return default
        return self.sec.values[key][0]

    def _num(self, key: str, conv, default, check, what):
        if key not in self.sec.values and default is not None:
            return default
        raw = self.str(key)
        try:
            v = conv(raw)
        except ValueError:
            raise self.error(key, f"{key} must be {what}, got {raw!r}") from None
        if check is not None and not check(v):
            raise self.error(key, f"{key} must be {what}, got {raw!r}")
        return v

    def int(self, key, default=None, check=None, what="an integer"):
        return self._num(key, int, default, check, what)

    def float(self, key, default=None, check=None, what="a number"):
        return self._num(key, float, default, check, what)


# --- scenario ------------------------------------------------------------------

SCENARIO_KEYS = {"name", "repetitions", "window_s", "warmup_s", "mode"}
SERVER_KEYS = {"server_id", "listen", "workers", "workload", "mean_service_us", "sigma", "item_count",
               "zipf_exponent", "workload_seed", "queue_capacity"}
BALANCER_KEYS = {"listen", "backends", "policy", "declared_rates"}
CLIENT_KEYS = {"client_id", "target", "start_delay_s", "total_requests", "schedule", "sender_threads", "seed"}
MODES = ("process", "inprocess")


def parse_scenario(source: str | Path, text: str | None = None) -> ScenarioSpec:
    """Parse and validate a scenario file (or ``text`` labelled ``source``)."""
    path = str(source)
    if text is None:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ScenarioError(f"cannot read scenario: {exc}", path) from exc
    sections = _read_sections(text, path)

    head = [s for s in sections if s.kind == "scenario"]
    if len(head) != 1:
        raise ScenarioError("exactly one [scenario] section is required", path,
                            head[1].line if len(head) > 1 else None)
    hr = _Reader(head[0], SCENARIO_KEYS, path)
    name = hr.str("name", Path(path).stem)
    repetitions = hr.int("repetitions", 13, lambda v: v >= 1, "a positive integer")
    window_s = hr.float("window_s", 1.0, lambda v: v > 0, "a positive number")
    warmup_s = hr.float("warmup_s", 0.0, lambda v: v >= 0, "a non-negative number")
    mode = hr.str("mode", "process")
    if mode not in MODES:
        raise hr.error("mode", f"mode must be one of {MODES}")

    servers: dict[str, ServerSpec] = {}
    clients: dict[str, ClientSpec] = {}
    balancer_secs = []
    client_secs = []
    for sec in sections:
        if sec.kind == "scenario":
            continue
        if sec.kind == "balancer":
            balancer_secs.append(sec)
        elif sec.kind in ("server", "client"):
            if not sec.name:
                raise ScenarioError(f"[{sec.kind}] needs a name, e.g. [{sec.kind} {sec.kind[0]}1]", path, sec.line)
            if sec.name in servers or sec.name in clients or sec.name == "balancer":
                raise ScenarioError(f"duplicate name {sec.name!r}", path, sec.line)
            if sec.kind == "server":
                servers[sec.name] = _server(sec, len(servers), path)
            else:
                client_secs.append(sec)
                clients[sec.name] = None  # placeholder keeps names unique
        else:
            raise ScenarioError(f"unknown section [{sec.kind}]", path, sec.line)
    if not servers:
        raise ScenarioError("scenario defines no [server NAME] section", path)
    if len(balancer_secs) > 1:
        raise ScenarioError("at most one [balancer] section", path, balancer_secs[1].line)

    for i, sec in enumerate(client_secs):
        clients[sec.name] = _client(sec, i, path, servers, bool(balancer_secs))
    if not clients:
        raise ScenarioError("scenario defines no [client NAME] section", path)
    ids = [c.client_id for c in clients.values()]
    if len(set(ids)) != len(ids):
        raise ScenarioError("client_id values must be unique", path)

    balancer = _balancer(balancer_secs[0], path, servers, clients) if balancer_secs else None
    return ScenarioSpec(name, servers, clients, balancer, repetitions, window_s, warmup_s, mode, path)


def _server(sec: _Section, index: int, path: str) -> ServerSpec:
    r = _Reader(sec, SERVER_KEYS, path)
    params = {}
    if r.has("sigma"):
        params["sigma"] = r.float("sigma", check=lambda v: v > 0, what="a positive number")
    if r.has("item_count"):
        params["item_count"] = r.int("item_count", check=lambda v: v >= 1, what="an integer >= 1")
    if r.has("zipf_exponent"):
        params["zipf_exponent"] = r.float("zipf_exponent", check=lambda v: v > 0, what="a positive number")
    try:
        wl = WorkloadSpec(
            name=r.str("workload", "fixed"),
            mean_service_us=r.float("mean_service_us", 1000.0, lambda v: v > 0, "a positive number"),
            params=params,
            seed=r.int("workload_seed", 0, lambda v: v >= 0, "a non-negative integer"),
        )
    except WorkloadConfigError as exc:
        raise r.error("workload", str(exc)) from None
    cap_raw = r.str("queue_capacity", "unbounded")
    cap = None if cap_raw == "unbounded" else r.int("queue_capacity", check=lambda v: v >= 1,
                                                   what="'unbounded' or a positive integer")
    return ServerSpec(
        server_id=r.int("server_id", index, lambda v: 0 <= v < 2**32, "an unsigned 32-bit integer"),
        listen_address=r.str("listen", "127.0.0.1:0"),
        workers=r.int("workers", 1, lambda v: v >= 1, "a positive integer"),
        workload=wl,
        queue_capacity=cap,
    )


def _client(sec: _Section, index: int, path: str, servers: dict, has_balancer: bool) -> ClientSpec:
    r = _Reader(sec, CLIENT_KEYS, path)
    target = r.str("target")
    if target == "balancer":
        if not has_balancer:
            raise r.error("target", "target 'balancer' but the scenario has no [balancer] section")
    elif target not in servers:
        raise r.error("target", f"target {target!r} is neither a server nor 'balancer'")
    try:
        schedule = QpsSchedule.parse(r.str("schedule"))
    except ScheduleError as exc:
        raise r.error("schedule", f"bad schedule: {exc}") from None
    return ClientSpec(
        client_id=r.int("client_id", index + 1, lambda v: 0 <= v < 2**64 - 1, "an unsigned 64-bit integer"),
        target_address=target,
        total_requests=r.int("total_requests", check=lambda v: v >= 1, what="a positive integer"),
        schedule=schedule,
        start_delay_s=r.float("start_delay_s", 0.0, lambda v: v >= 0, "a non-negative number"),
        sender_threads=r.int("sender_threads", 1, lambda v: v >= 1, "a positive integer"),
        seed=r.int("seed", index + 1, lambda v: v >= 0, "a non-negative integer"),
        name=sec.name,
    )


def _balancer(sec: _Section, path: str, servers: dict, clients: dict) -> BalancerSpec:
    r = _Reader(sec, BALANCER_KEYS, path)
    backends = [b.strip() for b in r.str("backends", ",".join(servers)).split(",") if b.strip()]
    for b in backends:
        if b not in servers:
            raise r.error("backends", f"backend {b!r} is not a server in this scenario")
    if not backends:
        raise r.error("backends", "balancer needs at least one backend")
    policy = r.str("policy", "round_robin")
    if policy not in POLICIES:
        raise r.error("policy", f"policy must be one of {POLICIES}")
    declared_raw = r.str("declared_rates", "none")
    declared: dict[int, float] = {}
    if declared_raw == "from_clients":
        # a client's expected rate is its first scheduled qps
        declared = {c.client_id: c.schedule.intervals[0][1] for c in clients.values()}
    elif declared_raw != "none":
        for part in declared_raw.split(","):
            try:
                cid, qps = part.split(":")
                declared[int(cid)] = float(qps)
            except ValueError:
                raise r.error("declared_rates", f"bad declared rate {part.strip()!r}; expected client_id:qps") from None
    return BalancerSpec(r.str("listen", "127.0.0.1:0"), backends, policy, declared)


# --- sweep ---------------------------------------------------------------------

SWEEP_KEYS = {"name", "scenario", "qps", "repetitions", "duration_s"}


def parse_sweep(source: str | Path, text: str | None = None) -> SweepSpec:
    path = str(source)
    if text is None:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ScenarioError(f"cannot read sweep: {exc}", path) from exc
    sections = _read_sections(text, path)
    if len(sections) != 1 or sections[0].kind != "sweep":
        raise ScenarioError("a sweep file holds exactly one [sweep] section", path,
                            sections[1].line if len(sections) > 1 else None)
    r = _Reader(sections[0], SWEEP_KEYS, path)
    base_path = Path(path).parent / r.str("scenario")
    try:
        base = parse_scenario(base_path)
    except ScenarioError as exc:
        raise r.error("scenario", f"base scenario: {exc}") from None
    try:
        qps = [float(q) for q in r.str("qps").split(",") if q.strip()]
    except ValueError:
        raise r.error("qps", "qps must be a comma-separated list of numbers") from None
    if not qps:
        raise r.error("qps", "qps list is empty")
    if any(q <= 0 for q in qps) or any(b <= a for a, b in zip(qps, qps[1:])):
        raise r.error("qps", "qps values must be positive and strictly increasing")
    duration = r.float("duration_s", 0.0, lambda v: v >= 0, "a non-negative number") or None
    reps = r.int("repetitions", base.repetitions, lambda v: v >= 1, "a positive integer")
    return SweepSpec(base, qps, reps, duration, r.str("name", Path(path).stem))
