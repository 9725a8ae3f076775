import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def pytest_addoption(parser):
    parser.addoption("--skip-acceptance", action="store_true", default=False,
                     help="skip the long-running acceptance criteria")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--skip-acceptance"):
        marker = pytest.mark.skip(reason="--skip-acceptance")
        for item in items:
            if "acceptance" in item.keywords:
                item.add_marker(marker)
