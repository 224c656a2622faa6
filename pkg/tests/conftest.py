"""Shared fixtures; collects one verdict line per acceptance criterion."""

from __future__ import annotations

import pytest

_VERDICTS: dict[str, str] = {}


class Verdicts:
    def record(self, criterion: str, passed: bool, detail: str) -> None:
        line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
        _VERDICTS[criterion] = line
        print(line)


@pytest.fixture(scope="session")
def verdicts() -> Verdicts:
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[key])
