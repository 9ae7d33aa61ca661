import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def record(request):
    """Record one PASS/FAIL line per acceptance criterion and echo it at once."""
    capture = request.config.pluginmanager.getplugin("capturemanager")

    def _record(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        CRITERIA[number] = line
        with capture.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
