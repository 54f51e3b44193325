import contextlib
import time

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record a PASS/FAIL line for an acceptance criterion; failures still propagate."""
    notes: list[str] = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        ACCEPTANCE[number] = (False, f"{title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        print(f"criterion {number}: FAIL  {ACCEPTANCE[number][1]}")
        raise
    detail = f"{title} ({time.perf_counter() - start:.1f}s)" + (f"; {'; '.join(notes)}" if notes else "")
    ACCEPTANCE[number] = (True, detail)
    print(f"criterion {number}: PASS  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
