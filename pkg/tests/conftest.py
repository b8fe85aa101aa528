import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# (criterion number, title, passed, detail) appended by test_acceptance
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {title}: {detail}")
