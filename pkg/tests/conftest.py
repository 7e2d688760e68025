import pytest

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, name = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _VERDICTS[number] = (name, report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        name, passed, detail = _VERDICTS[number]
        line = f"criterion {number:>2} {name}: {'PASS' if passed else 'FAIL'}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
