import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

PROGRAMS = os.path.join(os.path.dirname(__file__), "programs")

# filled by the acceptance module: criterion number -> (title, detail line)
ACCEPTANCE: dict = {}
_OUTCOMES: dict = {}


@pytest.fixture
def programs_dir():
    return PROGRAMS


def pytest_runtest_logreport(report):
    marker = "test_criterion_"
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith(marker):
        return
    num = int(name[len(marker):].split("_", 1)[0])
    if report.when == "call" or report.failed:
        prev = _OUTCOMES.get(num, "PASS")
        _OUTCOMES[num] = "FAIL" if report.failed or prev == "FAIL" else (
            "SKIP" if report.skipped else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_OUTCOMES):
        title, detail = ACCEPTANCE.get(num, ("", ""))
        line = f"{_OUTCOMES[num]} criterion {num:2d}: {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)
