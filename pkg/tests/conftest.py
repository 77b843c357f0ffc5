"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import re

import pytest

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n = marker.args[0]
    entry = _outcomes.setdefault(n, {"passed": True, "notes": []})
    entry["passed"] &= rep.passed
    entry["notes"] += [v for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        e = _outcomes[n]
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if e['passed'] else 'FAIL'}" + (f"  ({notes})" if notes else ""))


@pytest.fixture
def measured(record_property):
    """Record a measured value shown next to the criterion's PASS/FAIL line."""

    def record(text):
        record_property("measured", re.sub(r"\s+", " ", text))

    return record
