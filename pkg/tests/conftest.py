from __future__ import annotations

import re
import sys

import pytest

from stagekd.tensor import clear_tape

# One result line per acceptance criterion, echoed in a summary section at
# the end of the run (pytest's capture would otherwise swallow prints from
# the tests themselves).
ACCEPTANCE_LINES: list[str] = []

_CRITERION = re.compile(r"\[criterion (\d+)\]")


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line, file=sys.__stdout__, flush=True)  # live view when uncaptured


@pytest.fixture(autouse=True)
def fresh_tape():
    clear_tape()
    yield
    clear_tape()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    recorded = {m.group(1) for line in ACCEPTANCE_LINES
                for m in [_CRITERION.search(line)] if m}
    lines = list(ACCEPTANCE_LINES)
    for key in ("failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"criterion_(\d+)", rep.nodeid)
            if m and m.group(1).lstrip("0") not in {r.lstrip("0") for r in recorded}:
                lines.append(f"[criterion {m.group(1)}] FAIL raised before "
                             f"measuring; see {rep.nodeid}")
                recorded.add(m.group(1))
    if not lines:
        return

    def order(line: str):
        m = _CRITERION.search(line)
        return (1, int(m.group(1))) if m else (0, 0)  # setup lines first

    lines.sort(key=order)
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
