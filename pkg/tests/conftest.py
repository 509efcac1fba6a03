import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data" / "mnist-subset"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_paths():
    paths = {
        "train": (DATA / "train-images-idx3-ubyte.gz", DATA / "train-labels-idx1-ubyte.gz"),
        "test": (DATA / "test-images-idx3-ubyte.gz", DATA / "test-labels-idx1-ubyte.gz"),
    }
    if not all(p.exists() for pair in paths.values() for p in pair):
        pytest.skip("MNIST subset not present; run scripts/make_mnist_subset.py")
    return paths


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")
    os.environ.setdefault("OMP_NUM_THREADS", "1")


def pytest_terminal_summary(terminalreporter):
    module = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
