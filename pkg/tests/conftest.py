import aclog


def pytest_terminal_summary(terminalreporter):
    if not aclog.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(aclog.LINES, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(aclog.LINES[name])
