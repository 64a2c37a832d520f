import os

import numpy as np
import pytest

from paintkit import Checkpoint

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

# One pass/fail line per acceptance criterion, shown after the test summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_checkpoint(rng, n_tensors=3, dtype=np.float64, prefix="t"):
    tensors = {}
    for i in range(n_tensors):
        shape = tuple(int(d) for d in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        tensors[f"{prefix}{i}"] = rng.standard_normal(shape).astype(dtype)
    return Checkpoint(tensors, {"model_id": f"rand{rng.integers(1 << 30)}"})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
