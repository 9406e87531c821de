"""Shared fixtures for the meanfield_repr test-suite."""
from __future__ import annotations

import numpy as np
import pytest

from meanfield_repr.models import TimeGrid
from meanfield_repr.services.prob_tree import chain_tree, uniform_tree


@pytest.fixture
def chain3():
    return chain_tree(TimeGrid(1.0, 3))


@pytest.fixture
def binary2():
    """Depth-2 binary tree: root 0, children 1 and 2, leaves 3..6."""
    return uniform_tree(TimeGrid(1.0, 2), 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
