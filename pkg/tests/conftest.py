"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def report_criterion(request):
    lines = request.config.stash[ACCEPTANCE]

    def report(number: int, passed: bool, text: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {text}"
        lines.append((number, line))
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
