"""Shared pytest hooks: one pass/fail line per acceptance criterion at the end of the run."""
import pytest

# criterion number -> [title, passed, details]
CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call") or rep.skipped:
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = marker.args
    entry = CRITERIA.setdefault(number, [title, True, []])
    entry[1] = entry[1] and rep.passed
    entry[2].extend(f"{k}={v}" for k, v in item.user_properties if k != "criterion")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed, details = CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if details:
            line += "  [" + ", ".join(details) + "]"
        terminalreporter.write_line(line)
