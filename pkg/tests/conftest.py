import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from apex_ood.manifold import from_prototypes  # noqa: E402


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_manifold(rng, k_map, dim, tau=0.1):
    return from_prototypes([unit(rng.standard_normal((k, dim))) for k in k_map], tau)


def random_weights(rng, n, k_map):
    return [rng.dirichlet(np.ones(k), size=n) for k in k_map]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.VERDICTS:
            terminalreporter.write_line(line)
