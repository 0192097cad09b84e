"""Per-criterion PASS/FAIL lines for the acceptance suite.

Tests marked ``@pytest.mark.criterion(number, title)`` may attach numbers
they measured through the ``evidence`` fixture; both end up in the
terminal summary, one line per criterion.
"""

import pytest

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.fixture
def evidence(request):
    """Dict of measured values reported next to the criterion's verdict."""
    found = {}
    request.node.stash_evidence = found
    return found


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed
    if rep.when == "call" or failed:
        prev = _RESULTS.get(number)
        ok = not failed and rep.when == "call" and (prev is None or prev[1])
        found = dict(prev[2]) if prev else {}
        found.update(getattr(item, "stash_evidence", {}))
        _RESULTS[number] = (title, ok, found)


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, found = _RESULTS[number]
        detail = ", ".join(f"{k}={_fmt(v)}" for k, v in found.items())
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
