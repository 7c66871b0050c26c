import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[int, str] = {}


def record(number: int, name: str, ok: bool, detail: str) -> None:
    """Store one acceptance line; printed in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} ({name}): {detail}"
    _ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
