"""Per-criterion pass/fail summary for the acceptance suite."""

import pytest

_outcomes: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and not report.failed):
        return
    n, title = mark.args
    rec = _outcomes.setdefault(n, {"title": title, "failed": [], "ran": 0, "details": []})
    if report.when == "call":
        rec["ran"] += 1
        rec["details"] += [str(v) for k, v in item.user_properties if k == "detail"]
    if report.failed:
        rec["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        rec = _outcomes[n]
        verdict = "FAIL" if rec["failed"] or not rec["ran"] else "PASS"
        line = f"criterion {n:2d} {verdict}  {rec['title']}"
        if rec["details"]:
            line += "  [" + "; ".join(rec["details"]) + "]"
        if rec["failed"]:
            line += "  failed: " + ", ".join(rec["failed"])
        tr.write_line(line)
