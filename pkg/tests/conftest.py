"""Collects one pass/fail line per acceptance criterion and prints them
after the run, whatever the capture mode."""

from __future__ import annotations

import pytest

_REPORT: dict[int, tuple[str, bool, str]] = {}


class CriterionReport:
    def record(self, number: int, title: str, ok: bool, detail: str) -> bool:
        _REPORT[number] = (title, bool(ok), detail)
        return bool(ok)


@pytest.fixture(scope="session")
def criteria() -> CriterionReport:
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_REPORT):
        title, ok, detail = _REPORT[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {title}: {detail}")
