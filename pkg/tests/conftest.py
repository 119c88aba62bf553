import numpy as np
import pytest

from evogen.featurize import grid_from_arrays
from evogen.model import ModelConfig, init_params

# Filled by test_acceptance.py; printed once at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_grid(rng, n, length, gap_rate=0.1, max_del=3):
    tokens = rng.integers(0, 21, size=(n, length))
    gaps = rng.random((n, length)) < gap_rate
    gaps[0] = False
    tokens[gaps] = 21
    dels = rng.integers(0, max_del + 1, size=(n, length))
    dels[0] = 0
    return grid_from_arrays(tokens, dels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_cfg():
    return ModelConfig.toy(latent_dims=(2, 3))


@pytest.fixture(scope="session")
def toy_params(toy_cfg):
    return init_params(toy_cfg, seed=7, zero_init=False)


SMALL_A3M = """>query
ACDEFGHIKL
>hit1 some description
ACDeFGHIK-L
>hit2
AC-EFGHIKM
>hit3
acACDEYGHIKL
"""
