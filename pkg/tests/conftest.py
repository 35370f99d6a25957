import sys
from pathlib import Path

import pytest

# helper modules (oracles, toy models, graphs) live next to the tests
sys.path.insert(0, str(Path(__file__).resolve().parent))

_VERDICTS: dict = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        sys.__stdout__.write("\n" + line + "\n")
        sys.__stdout__.flush()
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
