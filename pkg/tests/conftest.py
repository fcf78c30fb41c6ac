import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the per-criterion pass/fail lines from the acceptance module."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "REPORT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
