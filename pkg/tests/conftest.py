import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE = []


@pytest.fixture
def record_acceptance():
    """Record one acceptance line; call before asserting so failures are reported too."""

    def record(criterion: str, passed: bool, detail: str):
        _ACCEPTANCE.append((criterion, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split(".")[0])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {crit}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
