from __future__ import annotations

import numpy as np
import pytest
import torch

from stagekit.phantom import PhantomConfig, generate_phantom
from stagekit.volgrid import StageLabel

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def phantom_t2():
    return generate_phantom(202, StageLabel.UNDER_T2)


@pytest.fixture(scope="session")
def phantom_t3():
    return generate_phantom(303, StageLabel.OVER_T3)


@pytest.fixture(scope="session")
def phantom_batch():
    """Ten mixed-stage phantoms."""
    return [
        generate_phantom(1000 + i, StageLabel.OVER_T3 if i % 2 else StageLabel.UNDER_T2)
        for i in range(10)
    ]


def random_masks(rng: np.random.Generator, shape=(6, 6, 6), p=0.4):
    return rng.random(shape) < p, rng.random(shape) < p
