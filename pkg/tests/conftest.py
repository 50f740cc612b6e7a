import _report


def pytest_terminal_summary(terminalreporter, exitstatus):
    if _report.lines:
        terminalreporter.section("acceptance criteria")
        for line in _report.lines:
            terminalreporter.write_line(line)
