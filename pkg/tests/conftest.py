import pytest

_results: dict[int, tuple[str, list[str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    _results[marker.args[0]] = ("PASS" if rep.passed else "FAIL", details)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, details = _results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}")
        for line in details:
            terminalreporter.write_line(f"    {line}")
