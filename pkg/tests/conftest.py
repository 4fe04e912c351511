import numpy as np
import pytest

from duplexthink.vocab import build_vocabs


@pytest.fixture(scope="session")
def vocabs():
    return build_vocabs()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
