import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")

os.environ.setdefault("DRL_LOG_LEVEL", "error")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
