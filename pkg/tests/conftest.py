"""Prints one pass/fail line per acceptance criterion at the end of the run."""

_RESULTS = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        if "criterion" in props:
            _RESULTS[props["criterion"]] = (report.outcome, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        outcome, title, detail = _RESULTS[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number} [{status}] {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
