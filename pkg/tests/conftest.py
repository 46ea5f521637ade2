"""Prints one PASS/FAIL line per acceptance criterion after the run."""

import pytest

_RESULTS: dict[str, tuple[str, str]] = {}


@pytest.fixture
def criterion(request):
    """Record a short detail string for the acceptance line of this test."""
    notes: list[str] = []
    request.node._criterion_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    key = str(marker.args[0])
    notes = "; ".join(getattr(item, "_criterion_notes", []))
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _RESULTS[key] = (status, notes)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: int(k)):
        status, notes = _RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {notes}".rstrip())
