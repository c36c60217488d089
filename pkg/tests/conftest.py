"""Prints one ``ACCEPTANCE <criterion>: PASS|FAIL`` line per acceptance test."""

_results = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1].removeprefix("test_")
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _results[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _results.items():
        terminalreporter.write_line(f"ACCEPTANCE {name}: {status}" + (f"  ({detail})" if detail else ""))
