import numpy as np
import pytest

_CRITERIA = []


@pytest.fixture
def report():
    """Record and print one pass/fail line for an acceptance criterion."""

    def _report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        print(line)
        _CRITERIA.append((number, line))
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA, key=lambda c: (int(str(c[0]).rstrip("b")), str(c[0]))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
