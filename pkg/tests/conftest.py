from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flywheel_rl.envworld import generate_env_family, trivial_spec

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def family():
    return generate_env_family(12, 1)


@pytest.fixture(scope="session")
def trivial():
    return trivial_spec()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class AcceptanceLog:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __init__(self):
        self.lines: dict[str, str] = {}

    def record(self, key: str, ok: bool, detail: str) -> bool:
        line = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
        self.lines[key] = line
        print(line)
        return ok


_ACCEPTANCE = AcceptanceLog()


@pytest.fixture(scope="session")
def acceptance():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE.lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE.lines):
            terminalreporter.write_line(_ACCEPTANCE.lines[key])
