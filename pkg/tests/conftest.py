import pytest

_LINES = []


@pytest.fixture(scope="session")
def report():
    """Record a one-line verdict; the lines are repeated in the terminal summary."""

    def add(tag, ok, detail):
        line = f"{tag} {'PASS' if ok else 'FAIL'} {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
