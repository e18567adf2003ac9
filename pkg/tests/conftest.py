"""Shared fixtures; prints one line per acceptance criterion at the end of the session."""

import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def record():
    """record(number, name, passed, detail) stores an acceptance outcome."""

    def _record(number: int, name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (name, bool(passed), detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
