import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_mask(rng: np.random.Generator, h: int, w: int, p: float = 0.3) -> np.ndarray:
    return (rng.uniform(size=(h, w)) < p).astype(np.uint8)
