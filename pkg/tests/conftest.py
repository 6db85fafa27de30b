from __future__ import annotations

from importlib.resources import files
from pathlib import Path

import pytest

from smpsagent.netlist import parse_netlist

DATA = Path(str(files("smpsagent") / "data"))

# acceptance criterion number -> one-line description, filled from markers
_CRITERIA: dict[int, str] = {}
_OUTCOMES: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _CRITERIA[number] = title
            _OUTCOMES.setdefault(number, [])
            item.user_properties.append(("criterion", number))


def pytest_runtest_logreport(report):
    number = dict(report.user_properties).get("criterion")
    if number is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        _OUTCOMES[number].append(report.passed and report.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        results = _OUTCOMES.get(number, [])
        ok = bool(results) and all(results)
        status = "PASS" if ok else ("FAIL" if results else "NOT RUN")
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {_CRITERIA[number]}")


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def buck_deck():
    return parse_netlist((DATA / "buck.cir").read_text())


@pytest.fixture(scope="session")
def buck_dataset(buck_deck):
    from smpsagent.engine import simulate
    return simulate(buck_deck)
