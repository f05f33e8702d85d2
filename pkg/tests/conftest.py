from __future__ import annotations

import pytest

from pibsde.model import CirModel, LinearOuModel

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for ln in sorted(lines, key=lambda s: (int(s.split()[1].rstrip(":").split(".")[0]), s)):
        terminalreporter.write_line(ln)


@pytest.fixture
def linear():
    return LinearOuModel()


@pytest.fixture
def cir():
    return CirModel()
