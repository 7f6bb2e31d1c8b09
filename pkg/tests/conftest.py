"""Shared pytest plumbing.

The acceptance tests record one verdict line each; this hook replays them
in the terminal summary so the outcome of every numbered check is visible
even when stdout capture is on.
"""

VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.write_sep("-", "acceptance verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)
