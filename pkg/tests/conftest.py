import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dpe.store import FeatureStore  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def random_store(gen, n=40, dim=4, k=3, n_groups=None):
    labels = np.concatenate([np.arange(k), gen.integers(0, k, n - k)])
    groups = None if n_groups is None else np.concatenate([np.arange(n_groups), gen.integers(0, n_groups, n - n_groups)])
    return FeatureStore(gen.normal(size=(n, dim)), labels, groups, n_classes=k, n_groups=n_groups)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
