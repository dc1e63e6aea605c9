import pytest

_criteria = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for name, value in report.user_properties:
        if name == "criterion":
            _criteria.append((value, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in sorted(_criteria):
        terminalreporter.write_line(f"[{'PASS' if outcome == 'passed' else 'FAIL'}] {label}")


@pytest.fixture
def criterion(record_property):
    def mark(label):
        record_property("criterion", label)
    return mark
