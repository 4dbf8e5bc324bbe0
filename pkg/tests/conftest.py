import pytest

from myzone import crypto


@pytest.fixture(params=["toy", "standard"])
def scheme(request):
    return crypto.get_scheme(request.param)


@pytest.fixture
def toy():
    return crypto.TOY


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
