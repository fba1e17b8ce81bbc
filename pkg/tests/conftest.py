import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sparsemn.model import Dataset


def make_dataset(rng, n, p, K, corr=0.0):
    """Random dataset with every class guaranteed present."""
    from oracles import random_multinomial_instance
    for _ in range(50):
        X, y, B = random_multinomial_instance(rng, n, p, K, corr=corr)
        if np.unique(y).size == K:
            return Dataset(X, y, K), B
    raise RuntimeError("could not draw a dataset with all classes")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
