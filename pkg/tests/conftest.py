import pytest

VERDICTS: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        VERDICTS[number] = (ok, title, detail)
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        ok, title, detail = VERDICTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
