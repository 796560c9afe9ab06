import numpy as np
import pytest
import torch

from stev.data import WindowSample, generate_synthetic
from stev.numerics import Rng
from stev.stfe import ModelConfig

torch.set_num_threads(1)

# B = 2 mixed-shape samples, C = 4, M = 1, L = 2, J = 2
TINY = ModelConfig(channels=4, blocks=1, layers=2, kernel=2, dilation_rate=2, cheb_order=2,
                   node_dim=3, time_dim=2, head_channels=5, proj_dim=4, H=12, Q=3)


def random_windows(rng: np.random.Generator, sizes, H=12, Q=3, n_vars=12, v1_size=None):
    """Windows with sorted random variable subsets; sizes <= v1_size draw
    from the first v1_size variables only."""
    out = []
    for i, n in enumerate(sizes):
        pool = n_vars if v1_size is None or n > v1_size else v1_size
        ids = np.sort(rng.choice(pool, size=n, replace=False))
        out.append(WindowSample(rng.normal(size=(n, H)), rng.normal(size=(n, Q)), ids,
                                int(rng.integers(0, 500))))
    return out


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic(rng=Rng(0))


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(n_continual=4, n_expanding=2, steps_per_day=6, days_p1=10,
                              days_p2=2, days_valid=2, days_test=2, rng=Rng(3))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
