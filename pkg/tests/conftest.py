import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> list of (test id, passed)
_CRITERIA: dict[int, list] = {}
_TITLES: dict[int, str] = {}
_OWNER: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _TITLES[number] = title
            _CRITERIA.setdefault(number, [])
            _OWNER[item.nodeid] = number


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    number = _OWNER.get(report.nodeid)
    if number is not None:
        _CRITERIA[number].append((report.nodeid, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        runs = _CRITERIA[number]
        if not runs:
            status = "NOT RUN"
        else:
            status = "PASS" if all(ok for _, ok in runs) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status:<7} {_TITLES[number]}")
