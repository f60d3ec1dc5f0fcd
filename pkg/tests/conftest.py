"""Collects acceptance outcomes and prints one line per criterion at the end."""

from collections import defaultdict

import pytest

_results = defaultdict(list)  # criterion id -> [(check name, passed, detail)]
_titles = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    cid, title = mark.args
    _titles[cid] = title
    detail = dict(item.user_properties).get("detail", "")
    _results[cid].append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_results, key=int):
        checks = _results[cid]
        ok = all(p for _, p, _ in checks)
        parts = "; ".join(f"{n.removeprefix('test_')}={'pass' if p else 'FAIL'}"
                          + (f" ({d})" if d else "") for n, p, d in checks)
        tr.write_line(f"criterion {cid} {'PASS' if ok else 'FAIL'}: {_titles[cid]} | {parts}")
