"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_results: dict[int, dict] = {}


@pytest.fixture
def measured(request):
    """Dict a criterion test fills with the values it measured, for the summary line."""
    marker = request.node.get_closest_marker("acceptance")
    data: dict = {}
    if marker is not None:
        _results.setdefault(marker.args[0], {"title": marker.args[1], "outcome": "not run"})["measured"] = data
    return data


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    entry = _results.setdefault(marker.args[0], {"title": marker.args[1], "outcome": "not run"})
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        entry["outcome"] = "PASS" if rep.passed else "FAIL"
        entry["seconds"] = rep.duration


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        e = _results[n]
        detail = ", ".join(f"{k}={v}" for k, v in e.get("measured", {}).items())
        secs = f" [{e['seconds']:.1f} s]" if "seconds" in e else ""
        terminalreporter.write_line(f"AC{n:02d} {e['outcome']:<4} {e['title']}{secs}" + (f": {detail}" if detail else ""))
