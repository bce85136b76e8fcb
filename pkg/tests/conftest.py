import pytest

ACCEPTANCE = []


def record(name, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


@pytest.fixture
def report():
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
