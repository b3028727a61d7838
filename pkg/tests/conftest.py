import functools

import numpy as np
import pytest

from securebayes.he import load_preset, make_backend


@functools.lru_cache(maxsize=None)
def lattice(preset: str, seed: int = 1):
    """(backend, keys) shared across tests; key generation dominates setup time."""
    b = make_backend("lattice", load_preset(preset), seed)
    return b, b.generate_keys()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_lattice():
    return lattice("tiny")


@pytest.fixture(scope="session")
def desk_lattice():
    return lattice("desk")
