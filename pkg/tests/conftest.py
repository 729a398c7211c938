from __future__ import annotations

import numpy as np
import pytest

from msthin.delay import DelayModel


@pytest.fixture
def weibull():
    return DelayModel(2.0, 0.5, (0.1,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

