import criteria


def pytest_terminal_summary(terminalreporter):
    if not criteria.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria.LINES):
        terminalreporter.write_line(criteria.LINES[number])
