import pytest

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}
N_CRITERIA = 13


@pytest.fixture
def report():
    def _report(n, passed, detail=""):
        ACCEPTANCE[n] = (bool(passed), detail)
        return passed
    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            tr.write_line(f"criterion {n:2d}: FAIL  (not evaluated)")
