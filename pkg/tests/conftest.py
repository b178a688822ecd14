"""Shared pytest wiring.

The acceptance checks each record one summary line; printing them in a
terminal section at the end of the run keeps them visible even though
pytest captures per-test stdout.
"""

_acceptance_lines: list[str] = []


def record_acceptance_line(line: str) -> None:
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance checks")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
