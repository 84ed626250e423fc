"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import pytest

_RESULTS = {}
_DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test realizes the named acceptance criterion")


@pytest.fixture
def measured(request):
    """Dict-like sink for the numbers behind a criterion's verdict."""
    marker = request.node.get_closest_marker("criterion")
    name = marker.args[0] if marker else request.node.name
    return _DETAILS.setdefault(name, {})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or report.failed:
        name = marker.args[0]
        _RESULTS[name] = _RESULTS.get(name, True) and report.passed


def _fmt(value):
    return f"{value:.4g}" if isinstance(value, float) else str(value)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _RESULTS.items():
        details = ", ".join(f"{k}={_fmt(v)}" for k, v in _DETAILS.get(name, {}).items())
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{details}]" if details else ""))
