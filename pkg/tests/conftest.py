import pytest
from hypothesis import settings

from esscale.noise import build_table

settings.register_profile("esscale", deadline=None, max_examples=50)
settings.load_profile("esscale")


@pytest.fixture(scope="session")
def table():
    return build_table(7, 200_000)


@pytest.fixture(scope="session")
def tiny_table():
    return build_table(3, 5_000)


@pytest.fixture(scope="session")
def big_table():
    return build_table(7)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "ACCEPTANCE", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
