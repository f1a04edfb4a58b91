import functools
import json

import numpy as np
import pytest

from covsteer.environment import builtin_scenario, builtin_scenario_path, load_scenario
from covsteer.program import assemble
from covsteer.solver import SolveOptions, solve


@functools.lru_cache(maxsize=None)
def solved(name: str, mean_only: bool = False):
    """Solve a built-in scenario once per test session."""
    scenario = builtin_scenario(name)
    assembled = assemble(scenario, mean_only=mean_only)
    return scenario, assembled, solve(assembled, SolveOptions(time_limit=900.0))


def scenario_doc(name: str) -> dict:
    return json.loads(builtin_scenario_path(name).read_text())


def tweak(name: str, **changes):
    """Load a built-in scenario document with top-level or dotted-key overrides."""
    doc = scenario_doc(name)
    for key, value in changes.items():
        node = doc
        parts = key.split("__")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return load_scenario(doc)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Criterion number -> result line, filled by test_acceptance.py.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
