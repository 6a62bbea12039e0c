import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def criterion():
    """``criterion(cid, ok, detail)`` records and prints one acceptance line."""

    def record(cid: str, ok: bool, detail: str) -> bool:
        line = f"{cid}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[cid] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[cid])
