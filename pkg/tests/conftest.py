import pytest

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    n, title = m.args
    prev = _results.get(n)
    failed = rep.failed or (prev is not None and not prev[1])
    if rep.when == "call" or rep.failed or rep.skipped:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
        _results[n] = (title, not failed and not rep.skipped, detail or (prev[2] if prev else ""))


@pytest.fixture
def measured(request):
    """Attach a measurement string to the acceptance summary line."""
    def add(text):
        request.node.user_properties.append(("measured", text))
    return add


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        title, ok, detail = _results[n]
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)
