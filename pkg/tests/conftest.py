"""Collects one pass/fail line per acceptance criterion and prints them after the run."""
import pytest

_RESULTS: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    failed = report.failed
    if report.when == "setup" and (failed or report.skipped):
        _RESULTS[label] = {"ok": False, "detail": "skipped" if report.skipped else "setup failed"}
    elif report.when == "call":
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if failed and not detail:
            detail = report.longreprtext.strip().splitlines()[-1] if report.longreprtext else "failed"
        _RESULTS[label] = {"ok": report.passed, "detail": detail}


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_RESULTS, key=lambda s: int(s.split(".")[0])):
        r = _RESULTS[label]
        terminalreporter.write_line(f"{'PASS' if r['ok'] else 'FAIL'}  {label}: {r['detail']}")
