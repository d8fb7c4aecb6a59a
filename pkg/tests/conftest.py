import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes naive_reference importable

from streamcache import PositionClock, SimConfig, TokenFactory


@pytest.fixture
def cfg():
    return SimConfig()


@pytest.fixture
def factory():
    return TokenFactory()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_visual(factory, clock=None, d=4, frame=0):
    tok = factory.visual(frame, np.zeros(d))
    if clock is not None:
        tok.entry_position = clock.next()
    return tok
