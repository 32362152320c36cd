"""Collects one verdict line per acceptance criterion and prints them after the run."""
import pytest

VERDICTS = []


@pytest.fixture
def verdict(request):
    """``verdict(label, ok, detail)`` records and prints one criterion line, then asserts it."""

    def record(label: str, ok: bool, detail: str = ""):
        line = f"{label} {'PASS' if ok else 'FAIL'}" + (f": {detail}" if detail else "")
        VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
