"""Collects acceptance-criterion outcomes and prints one line per criterion."""

_criteria = {}  # number -> [title, outcome, details]
_owner = {}  # nodeid -> criterion number


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


def pytest_collection_finish(session):
    for item in session.items:
        mark = item.get_closest_marker("criterion")
        if mark is None:
            continue
        number, title = mark.args
        _owner[item.nodeid] = number
        _criteria.setdefault(number, [title, "NOT RUN", []])


def pytest_runtest_logreport(report):
    number = _owner.get(report.nodeid)
    if number is None:
        return
    entry = _criteria[number]
    if report.failed:
        entry[1] = "FAIL"
    elif report.skipped and entry[1] != "FAIL":
        entry[1] = "SKIP"
    elif report.when == "call" and entry[1] == "NOT RUN":
        entry[1] = "PASS"
    if report.when == "call":
        entry[2].extend(str(v) for k, v in report.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome, details = _criteria[number]
        extra = f"  ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"criterion {number:2d}  {outcome}  {title}{extra}")
