import pytest

CRITERIA = {}


def pytest_addoption(parser):
    parser.addoption("--paper-scale", action="store_true", default=False,
                     help="also run the h = 1/64 acceptance check")


@pytest.fixture(scope="session")
def paper_scale(request):
    return request.config.getoption("--paper-scale")


@pytest.fixture(scope="session")
def criteria():
    return CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
