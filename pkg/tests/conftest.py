import numpy as np
import pytest

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def note(request):
    """Attach a one-line detail to the acceptance summary for this test."""
    def _note(text: str) -> None:
        request.node.user_properties.append(("detail", text))
    return _note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        n, title = marker.args
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        prev = _CRITERIA.get(n)
        ok = rep.outcome == "passed" and (prev is None or prev[0])
        details = [d for d in (prev[2] if prev else "", detail) if d]
        _CRITERIA[n] = (ok, title, " | ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
