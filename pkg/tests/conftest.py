import pytest

import supcascade as sc

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def trace_1000():
    return sc.synthesize_trace(1000, 0.7, 0.9, seed=7)


@pytest.fixture
def acceptance_log():
    def log(criterion: str, passed: bool, detail: str = "") -> None:
        status = "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append(f"[{status}] {criterion}" + (f": {detail}" if detail else ""))

    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
