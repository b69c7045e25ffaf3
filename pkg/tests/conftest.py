from __future__ import annotations

# Verdict lines appended by the acceptance suite, printed after the run so they
# survive pytest's output capture.
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
