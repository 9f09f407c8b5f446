import pytest

# criterion number -> (passed, one-line detail), filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, title, passed, detail):
    ACCEPTANCE[number] = (title, passed, detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")


@pytest.fixture
def report(capsys):
    """Record a criterion result and print its pass/fail line immediately."""

    def _report(number, title, passed, detail):
        record(number, title, passed, detail)
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
        return passed

    return _report
