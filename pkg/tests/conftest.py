import pytest
from hypothesis import HealthCheck, settings

from smtpflow.synth import SynthConfig, generate

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_acceptance_results = []


@pytest.fixture(scope="session")
def default_sample():
    """The default generator run (10^5 sessions, seed 0), shared across modules."""
    return generate(SynthConfig())


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _acceptance_results.append((number, title, report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, detail in sorted(_acceptance_results):
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        line = f"{status}  AC{number:>2}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
