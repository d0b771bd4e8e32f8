import numpy as np
import pytest

from csvd import DecodeConfig, build_index, synth_vocab


@pytest.fixture(scope="session")
def small_table():
    # 10 well-separated modes, tight spread: radii land well under 0.35
    return synth_vocab(500, 16, 10, 0.05, 3)


@pytest.fixture(scope="session")
def small_index(small_table):
    return build_index(small_table, 10, seed=0)


@pytest.fixture(scope="session")
def spherical_index(small_table):
    return build_index(small_table, 10, mode="spherical", seed=0)


@pytest.fixture(scope="session")
def augmented_index(small_table):
    return build_index(small_table, 10, mode="bias_augmented", seed=0)


@pytest.fixture(scope="session")
def medium_table():
    return synth_vocab(1000, 32, 20, 0.05, 5)


@pytest.fixture(scope="session")
def medium_index(medium_table):
    return build_index(medium_table, 20, seed=0)


@pytest.fixture
def base_cfg():
    return DecodeConfig(k=5, epsilon=0.05)


def unit_queries(n, d, seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, d))
    return q / np.linalg.norm(q, axis=1, keepdims=True)
