import numpy as np
import pytest
import torch

from finet import synthdata as sd


@pytest.fixture(scope="session")
def small_dataset():
    return sd.generate_dataset(24, seed=11)


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    np.random.seed(0)
    yield
