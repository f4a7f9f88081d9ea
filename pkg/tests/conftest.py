import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("suite")

# One line per acceptance criterion, printed after the run so the
# verdicts survive even a noisy test log.
_CRITERIA: list[tuple[str, bool, str]] = []


def _record(name: str, passed: bool, detail: str) -> None:
    _CRITERIA.append((name, passed, detail))


@pytest.fixture(scope="session")
def criterion_log():
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
