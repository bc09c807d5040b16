"""Shared pytest plumbing.

The acceptance tests in test_acceptance.py each emit a one-line verdict
through the `verdict` fixture; this hook replays those lines at the end
of the run so a full `pytest` finishes with a compact report of every
guaranteed behavior, whether or not output capture is on.
"""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def emit(line: str) -> None:
        _VERDICTS.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _VERDICTS:
        terminalreporter.section("acceptance summary")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
