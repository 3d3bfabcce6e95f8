import pytest

# one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA_LINES = []


@pytest.fixture
def criterion_report():
    def report(number, ok, detail):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        line = f"CRITERION {number}: {status} ({detail})"
        CRITERIA_LINES.append((number, line))
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(CRITERIA_LINES):
        terminalreporter.write_line(line)
