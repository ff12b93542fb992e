from __future__ import annotations

import sys

import pytest

from swgspd.engine import DetectorParams, GateClock, HoldOffPolicy, PhotonSource, run_sequence
from swgspd.io import bundled_presets


@pytest.fixture(scope="session")
def presets():
    return bundled_presets()


@pytest.fixture(scope="session")
def p223(presets):
    return presets[223.0]


@pytest.fixture(scope="session", autouse=True)
def warm_jit(presets):
    """Compile (or load cached) engine kernels once, outside any timed section."""
    p = presets[223.0]
    for method in ("fast", "naive"):
        run_sequence(p, GateClock(), PhotonSource(), HoldOffPolicy(), 10_000, 0, True, method)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    lines = getattr(acc, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
