from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def case_study_dir() -> Path:
    return SCENARIOS / "case_study"


@pytest.fixture(scope="session")
def minimal_dir() -> Path:
    return SCENARIOS / "minimal"


@pytest.fixture(scope="session")
def case_study(case_study_dir):
    from megaloop.scenario import load_scenario
    return load_scenario(case_study_dir)


@pytest.fixture(scope="session")
def case_study_run(case_study):
    from megaloop.runner import run
    return run(case_study)


# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
