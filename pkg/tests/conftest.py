import os

import psutil
import pytest


def live_children() -> list[int]:
    """PIDs of live descendants of the test process."""
    return [p.pid for p in psutil.Process(os.getpid()).children(recursive=True)
            if p.is_running() and p.status() != psutil.STATUS_ZOMBIE]


@pytest.fixture
def no_orphans():
    before = set(live_children())
    yield
    leftover = set(live_children()) - before
    assert not leftover, f"orphaned child processes: {sorted(leftover)}"


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def verdict(request, capsys):
    """Record one PASS/FAIL line per acceptance criterion; shown inline and in the summary."""

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        with capsys.disabled():
            print(f"\n{line}", flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
