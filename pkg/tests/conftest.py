import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from paadetect.data import SyntheticDatasetSpec, generate_dataset, load_dataset  # noqa: E402


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """8 classes x 15 images: enough for a short training smoke run."""
    out = tmp_path_factory.mktemp("tiny")
    generate_dataset(SyntheticDatasetSpec(classes=8, per_class=15, seed=3), out)
    return out


@pytest.fixture(scope="session")
def tiny_data(tiny_data_dir):
    return load_dataset(tiny_data_dir)


@pytest.fixture(scope="session")
def calib_data_dir(tmp_path_factory):
    """8 classes x 130 images, so validation and test splits hold >= 100 images each."""
    out = tmp_path_factory.mktemp("calib")
    generate_dataset(SyntheticDatasetSpec(classes=8, per_class=130, seed=5), out)
    return out


@pytest.fixture(scope="session")
def calib_data(calib_data_dir):
    return load_dataset(calib_data_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
