"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end."""
import pytest

_RESULTS = {}


class AcceptanceReport:
    def record(self, criterion: int, ok: bool, detail: str) -> None:
        parts = _RESULTS.setdefault(criterion, [])
        parts.append((bool(ok), detail))
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def acceptance_report():
    return AcceptanceReport()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_RESULTS):
        parts = _RESULTS[criterion]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
