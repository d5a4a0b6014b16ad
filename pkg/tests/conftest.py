import pytest

# filled by tests/test_acceptance.py: (number, title, passed, detail)
ACCEPTANCE_RESULTS = []


@pytest.fixture
def acceptance_record():
    def record(number, title, passed, detail):
        ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}: {detail}")
