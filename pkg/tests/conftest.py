import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        status = "PASS" if report.passed else "FAIL"
        _criteria.append((props["criterion"], status, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for crit, status, detail in sorted(_criteria, key=lambda c: int(c[0])):
        terminalreporter.write_line(f"criterion {crit}: {status}  {detail}")
