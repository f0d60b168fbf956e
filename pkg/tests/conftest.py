import sys
from pathlib import Path

import pytest

SRC = Path(__file__).resolve().parent.parent / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))


# One line per gate criterion, printed after the run so they survive output
# capture. Lines are recorded before the asserts fire, so a red criterion
# still reports itself.
_GATE_LINES: list[str] = []


def _record(n: int, desc: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    tail = f" ({detail})" if detail else ""
    _GATE_LINES.append(f"[criterion {n}] {status}: {desc}{tail}")


@pytest.fixture
def criterion():
    return _record


def pytest_terminal_summary(terminalreporter):
    if _GATE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_GATE_LINES):
            terminalreporter.write_line(line)
