"""Acceptance reporting: one PASS/FAIL line per criterion at the end of the run."""

_results: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        label = props.get("criterion", report.nodeid.split("::")[-1])
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _results[label] = (status, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_results, key=lambda s: int(s.split()[0]) if s[0].isdigit() else 99):
        status, detail = _results[label]
        terminalreporter.write_line(f"{status}  {label}" + (f"  [{detail}]" if detail else ""))
