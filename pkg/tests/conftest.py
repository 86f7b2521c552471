"""Shared pytest wiring: the acceptance marker and its end-of-run summary."""
import time

import pytest

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, text): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    cid, text = marker.args
    entry = _ACCEPTANCE.setdefault(item.nodeid, {"cid": cid, "text": text, "passed": True,
                                                 "detail": "", "seconds": 0.0})
    if report.when == "call":
        entry["seconds"] = report.duration
        detail = dict(item.user_properties).get("measured")
        if detail:
            entry["detail"] = detail
    if report.failed:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for entry in sorted(_ACCEPTANCE.values(), key=lambda e: e["cid"]):
        status = "PASS" if entry["passed"] else "FAIL"
        line = f"[{status}] {entry['cid']:<4} {entry['text']}  ({entry['seconds']:.1f}s)"
        if entry["detail"]:
            line += f"  measured: {entry['detail']}"
        tr.write_line(line)


@pytest.fixture
def measured(record_property):
    """Attach a measured-value string to the acceptance summary line."""
    def record(text):
        record_property("measured", text)
    return record


@pytest.fixture
def stopwatch():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start
