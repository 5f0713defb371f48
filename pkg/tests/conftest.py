import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=100, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# criterion number -> {"title", "outcomes", "notes"}
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


def _entry(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    number, title = mark.args
    return _CRITERIA.setdefault(number, {"title": title, "outcomes": [], "notes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is not None and (rep.when == "call" or rep.failed):
        entry["outcomes"].append(rep.passed)


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance line of the current test."""
    entry = _entry(request.node)
    return entry["notes"].append if entry is not None else (lambda _: None)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        ok = bool(e["outcomes"]) and all(e["outcomes"])
        line = f"criterion {number:>2}  {'PASS' if ok else 'FAIL'}  {e['title']}"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
