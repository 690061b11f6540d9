import numpy as np
import pytest

# criterion number -> "criterion N PASS|FAIL: detail", filled by test_acceptance
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def record_criterion():
    def _record(num: int, passed: bool, detail: str) -> None:
        word = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES[num] = f"criterion {num} {word}: {detail}"

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[num])
