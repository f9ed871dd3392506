import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mtlmammo.phantom import PhantomConfig, load_dataset, write_dataset  # noqa: E402
from mtlmammo.tensor import precision  # noqa: E402


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory):
    """64 train / 32 test phantoms at 32x32, shared by the fast training tests."""
    d = tmp_path_factory.mktemp("small_data")
    write_dataset(PhantomConfig(image_h=32, image_w=32, seed=3, lesion_rate=1.5), 64, 32, d)
    return d


@pytest.fixture(scope="session")
def small_dataset(small_data_dir):
    return load_dataset(small_data_dir)


@pytest.fixture(scope="session")
def default_data_dir(tmp_path_factory):
    """The default benchmark dataset: 512 train / 128 test, 64x64, seed 17."""
    d = tmp_path_factory.mktemp("default_data")
    write_dataset(PhantomConfig(seed=17), 512, 128, d)
    return d


@pytest.fixture(scope="session")
def default_dataset(default_data_dir):
    return load_dataset(default_data_dir)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
