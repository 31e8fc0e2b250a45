ACCEPTANCE_KEY = "acceptance_lines"


def pytest_configure(config):
    setattr(config, ACCEPTANCE_KEY, {})
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
