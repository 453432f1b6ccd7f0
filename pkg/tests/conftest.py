"""Acceptance report: one PASS/FAIL line per criterion at the end of the run."""

import re

import pytest

_OUTCOMES: dict[str, str] = {}
_NOTES: dict[str, list[str]] = {}
_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def _label(nodeid: str):
    m = _CRITERION.search(nodeid)
    if m is None:
        return None
    return f"criterion {m.group(1)} ({m.group(2).replace('_', ' ')})"


@pytest.fixture
def report(request):
    """Collect ``key=value`` notes shown next to the criterion's verdict."""
    notes = _NOTES.setdefault(request.node.nodeid, [])

    def add(**values):
        for k, v in values.items():
            notes.append(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}")
    return add


def pytest_runtest_logreport(report):
    label = _label(report.nodeid)
    if label is None:
        return
    if report.failed:
        _OUTCOMES[report.nodeid] = "FAIL"
    elif report.when == "call" and report.nodeid not in _OUTCOMES:
        _OUTCOMES[report.nodeid] = "PASS"
    elif report.skipped:
        _OUTCOMES.setdefault(report.nodeid, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_OUTCOMES, key=lambda n: int(_CRITERION.search(n).group(1))):
        notes = " ".join(_NOTES.get(nodeid, []))
        terminalreporter.write_line(f"{_label(nodeid)}: {_OUTCOMES[nodeid]}  {notes}".rstrip())
