"""Shared fixtures: builtin scenario traces are simulated once per session."""

from __future__ import annotations

import numpy as np
import pytest

from esbstack.acceptance import summarize_trace
from esbstack.manipulator import LinkChain
from esbstack.scenario import builtin_scenario
from esbstack.sim import run_scenario

_RUNS: dict = {}
_CRITERION_LINES: list = []


def record_criterion(line: str) -> None:
    _CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERION_LINES):
            terminalreporter.write_line(line)


def simulate_builtin(name: str, overrides=()):
    """``(scenario, trace, summary)`` for a builtin, cached by name and overrides."""
    key = (name, tuple(overrides))
    if key not in _RUNS:
        sc = builtin_scenario(name, overrides)
        trace = run_scenario(sc)
        _RUNS[key] = (sc, trace, summarize_trace(sc, trace))
    return _RUNS[key]


@pytest.fixture
def builtin_run():
    return simulate_builtin


@pytest.fixture
def planar3():
    return LinkChain([0.5, 0.5, 0.5])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
