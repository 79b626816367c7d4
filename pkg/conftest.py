"""Shared pytest configuration: the ``slow`` marker and small synthetic fixtures."""

import pytest
import torch

from splatrestore.scene import synth_scene


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run hours-scale acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_scene():
    """A 96-primitive textured scene at 32 x 32 with 3 train and 2 test views."""
    bundle = synth_scene(seed=7, n_primitives=96, n_train_views=3, n_test_views=2, image_size=32)
    bundle.metadata["scene_id"] = 0
    return bundle


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
