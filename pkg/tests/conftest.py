"""Shared fixtures and the acceptance summary printed at the end of a run."""

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    # a criterion split over several tests fails if any part fails
    prev = _RESULTS.get(number)
    if prev is not None and prev[1] == "FAIL":
        status = "FAIL"
    if prev is not None and prev[2]:
        detail = f"{prev[2]}; {detail}" if detail else prev[2]
    _RESULTS[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, detail = _RESULTS[number]
        line = f"{status} criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def detail(request):
    """Attach a measured value to the acceptance line of the current test."""
    def add(text):
        request.node.user_properties.append(("detail", text))
    return add
