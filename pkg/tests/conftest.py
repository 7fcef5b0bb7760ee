import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# Filled in by test_acceptance.py; printed after the run so a plain pytest
# invocation ends with one line per acceptance criterion.
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{status}] {num:2d}. {detail}")
