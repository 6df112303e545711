"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Shared pytest fixtures: builtin operators, small graded grids and
session-cached trajectories so the harness tests solve each problem once
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from operator_core import builtin_operator  # noqa: E402
from solver import TensorGrid, solve_ivp  # noqa: E402


@pytest.fixture(scope='session')
def model_1d():
    return builtin_operator('model-1d')


@pytest.fixture(scope='session')
def model_s11():
    return builtin_operator('model-s11')


@pytest.fixture(scope='session')
def model_s20_mixed():
    return builtin_operator('model-s20-mixed')


@pytest.fixture(scope='session')
def kimura_classical():
    return builtin_operator('kimura-classical')


@pytest.fixture(scope='session')
def grid_1d(model_1d):
    return TensorGrid.graded(model_1d, 65, layers=6)


@pytest.fixture(scope='session')
def grid_s20(model_s20_mixed):
    return TensorGrid.graded(model_s20_mixed, 17, layers=3)


def _default_profile(points):
    x = points[:, 0]
    return x * (1.0 - x)


def _alternate_profile(points):
    x = points[:, 0]
    return x * (1.0 - x) ** 2


@pytest.fixture(scope='session')
def model_1d_trajectory(model_1d, grid_1d):
    """u_t = x u_xx from x(1 - x) up to t = 1, implicit Euler"""
    return solve_ivp(model_1d, grid_1d, _default_profile(grid_1d.points), t_end=1.0, dt=2e-3,
                     scheme='implicit-euler', save_every=5)


@pytest.fixture(scope='session')
def model_1d_second_trajectory(model_1d, grid_1d):
    return solve_ivp(model_1d, grid_1d, _alternate_profile(grid_1d.points), t_end=1.0, dt=2e-3,
                     scheme='implicit-euler', save_every=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
