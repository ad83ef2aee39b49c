import numpy as np
import pytest

from spi.bench.corpus import make_corpus, make_queries
from spi.pyramid.encoder import ProgressiveEncoder


def unit_rows(rng, n, d):
    X = rng.normal(size=(n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def small_corpus():
    return make_corpus(n_docs=2000, dim=64, n_clusters=20, seed=5)


@pytest.fixture(scope="session")
def small_queries(small_corpus):
    return make_queries(small_corpus, n_queries=60, seed=6)


@pytest.fixture(scope="session")
def small_encoder(small_corpus):
    return ProgressiveEncoder(level_dims=(16, 32, 64), epochs=3, random_state=0).fit(
        small_corpus.vectors)


@pytest.fixture(scope="session")
def small_levels(small_encoder, small_corpus):
    return small_encoder.encode(small_corpus.vectors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for c in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[c])
