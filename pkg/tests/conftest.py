"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

ACCEPTANCE = {}


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}")
