"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_OUTCOMES: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, name = mark.args
    if rep.when == "setup" and rep.failed:
        _OUTCOMES[n] = (name, "FAIL")
    elif rep.when == "call":
        _OUTCOMES[n] = (name, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        name, status = _OUTCOMES[n]
        terminalreporter.write_line(f"criterion {n:2d} {name}: {status}")
