import pytest

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def record():
    """Record one acceptance line: record(n, title, ok, detail)."""

    def _record(n: int, title: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), title, detail)
        print(f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
