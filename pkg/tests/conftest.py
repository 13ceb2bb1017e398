import sys
from pathlib import Path

# lets test modules share helpers (e.g. the gradient checker in test_nn)
sys.path.insert(0, str(Path(__file__).parent))

CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str):
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
