"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS = {}
_NOTES = {}
_SEVERITY = ("PASS", "SKIP", "FAIL")


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    return mark.args[0], mark.args[1]


@pytest.fixture
def note(request):
    """Append a detail line to this test's criterion summary."""
    key = _criterion(request.node)

    def add(text):
        _NOTES.setdefault(key, []).append(str(text))
        print(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    key = _criterion(item)
    if key is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
        # a criterion spanning several tests passes only if all of them do
        prev = _RESULTS.get(key, "PASS")
        _RESULTS[key] = max(prev, status, key=_SEVERITY.index)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for (num, name), status in sorted(_RESULTS.items()):
        tr.write_line(f"criterion {num:>2} {name}: {status}")
        for line in _NOTES.get((num, name), []):
            tr.write_line(f"    {line}")
