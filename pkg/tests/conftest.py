import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def trained():
    """A small three-task model (two regression, one classification) and its data."""
    from helpers import trained_model
    return trained_model(seed=0, epochs=40)


# acceptance verdicts --------------------------------------------------------

VERDICTS = {}


@pytest.fixture
def verdict(request):
    """``verdict(ok, detail)`` records and prints one PASS/FAIL line, then asserts."""
    name = request.node.name

    def record(ok, detail):
        line = f"{name}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[name] = line
        print(line)
        assert ok, line

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if "verdict" in getattr(item, "fixturenames", ()) and rep.when == "call" \
            and rep.failed and item.name not in VERDICTS:
        VERDICTS[item.name] = f"{item.name}: FAIL  (error: {call.excinfo.typename})"


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[name])
