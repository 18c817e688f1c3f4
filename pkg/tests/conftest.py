_criteria: dict[str, str] = {}
_outcomes: dict[str, str] = {}


def pytest_collection_finish(session):
    for item in session.items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            _criteria[item.nodeid] = marker.args[0]


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    if report.failed:
        _outcomes[report.nodeid] = "FAIL"
    elif report.skipped:
        _outcomes.setdefault(report.nodeid, "SKIP")
    elif report.when == "call":
        _outcomes.setdefault(report.nodeid, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, name in _criteria.items():
        terminalreporter.write_line(f"{_outcomes.get(nodeid, 'NOT RUN'):8} {name}")
