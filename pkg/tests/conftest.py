"""Shared fixtures: deterministic RNGs and a small trained victim."""

import numpy as np
import pytest

from stealthflip import autodiff as ad
from stealthflip import data as dt
from stealthflip import victim as vc


@pytest.fixture(autouse=True)
def float64_mode():
    """Every test runs in 64-bit mode unless it switches explicitly."""
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_splits():
    """Small synthetic splits for unit tests (fast to build)."""
    return dt.make_digit_splits(seed=7, n_train=1200, n_attacker=96, n_test=300)


@pytest.fixture(scope="session")
def tiny_victim(tiny_splits):
    """A quickly trained small victim; accuracy is decent but not tuned."""
    model, info = vc.train_victim(
        vc.desk_architecture(), tiny_splits.train, epochs=8, seed=11)
    return model, info
