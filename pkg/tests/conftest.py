"""Collects acceptance-criterion outcomes and prints one line per criterion."""

from collections import defaultdict

_RESULTS: dict = defaultdict(list)
_TITLES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m:
            item.user_properties.append(("criterion", m.args[0]))
            _TITLES[m.args[0]] = m.args[1]


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _RESULTS[crit].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_RESULTS):
        ok = all(_RESULTS[crit])
        terminalreporter.write_line(f"criterion {crit:2d}: {'PASS' if ok else 'FAIL'}  "
                                    f"{_TITLES[crit]}")
