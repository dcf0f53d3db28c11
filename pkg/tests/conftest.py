import re

import pytest

_RESULTS = pytest.StashKey[dict]()
_NAME = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance outcome; printed in the terminal summary."""
    store = request.config.stash[_RESULTS]

    def report(number, ok, detail):
        store[number] = ("PASS" if ok else "FAIL", detail)
        return ok

    return report


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = _NAME.search(item.nodeid)
    if not m:
        return
    store = item.config.stash[_RESULTS]
    number = int(m.group(1))
    if rep.skipped and number not in store:
        store[number] = ("SKIP", str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else "skipped")
    elif rep.failed and number not in store:
        store[number] = ("FAIL", f"error during {rep.when}: {call.excinfo.typename if call.excinfo else ''}")


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash[_RESULTS]
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        status, detail = store[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
