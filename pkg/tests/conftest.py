import sys

import numpy as np
import pytest

from coachres.domain import RequestType, Train, make_requests


def pytest_addoption(parser):
    parser.addoption("--long", action="store_true", default=False, help="run full-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--long"):
        return
    skip = pytest.mark.skip(reason="needs --long")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def toy():
    """One coach of 2 seats; r1 is a pair over both legs, r2/r3 singles on leg 1 / leg 2."""
    types = [RequestType(1, 3, 2, 10), RequestType(1, 2, 1, 4), RequestType(2, 3, 1, 4)]
    return types, Train((2,))


@pytest.fixture
def toy_orders(toy):
    types, train = toy

    def order(*ids):
        return make_requests(types, ids)

    return order


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
