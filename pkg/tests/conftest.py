import pytest

# (number, title, passed, detail) rows collected by the acceptance suite
ACCEPTANCE: list = []


@pytest.fixture
def verdict():
    def record(number: int, title: str, passed: bool, detail: str):
        ACCEPTANCE.append((number, title, bool(passed), detail))
        print(f"[{number}] {title}: {'PASS' if passed else 'FAIL'} ({detail})")
        assert passed, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{number:>2}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")
