"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Tests for solver: grids, stencils, boundary masks, theta-scheme stepping
and the convergence and energy studies
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geometry_measure import WeightedMeasure
from operator_core import ContractError, builtin_operator
from oracles import exact_eigen_solution
from solver import (MAX_REFINEMENTS, Field, LinearSolveStagnation, TensorGrid, Trajectory, convergence_study,
                    dirichlet_mask, discretize, energy_check, first_derivative_matrix, fitted_order,
                    second_derivative_matrix, solve_ivp, stencils_for, tangent_face_mask, weighted_l2)


def eigen_exact(t, points):
    return exact_eigen_solution(t, points[:, 0])


class TestTensorGrid:
    def test_graded_layers(self, model_1d):
        grid = TensorGrid.graded(model_1d, 9, layers=3, ratio=0.5)
        nodes = grid.axes[0]
        assert grid.shape == (12,)
        np.testing.assert_allclose(nodes[:5], [0.0, 0.125 / 8, 0.125 / 4, 0.125 / 2, 0.125])
        assert grid.max_spacing == pytest.approx(0.125)

    def test_y_axes_span_the_box(self, model_s11):
        grid = TensorGrid.graded(model_s11, 5, layers=0, y_nodes=7)
        assert grid.shape == (5, 7)
        assert grid.kinds == ('x', 'y')
        assert grid.axes[1][0] == -1.0 and grid.axes[1][-1] == 1.0
        assert grid.points.shape == (35, 2)

    def test_signature_and_equality(self, model_1d):
        a = TensorGrid.graded(model_1d, 17, layers=2)
        b = TensorGrid.graded(model_1d, 17, layers=2)
        c = TensorGrid.graded(model_1d, 17, layers=3)
        assert a == b and hash(a) == hash(b)
        assert a != c
        assert a.signature()['digest'] != c.signature()['digest']

    @pytest.mark.parametrize('axes', [
        [np.array([0.0, 0.5])],
        [np.array([0.0, 0.5, 0.4])],
        [np.array([0.1, 0.5, 1.0])],
    ])
    def test_invalid_axes(self, axes):
        with pytest.raises(ContractError):
            TensorGrid(axes, 1)

    def test_cell_volumes_sum_to_box(self, model_s11):
        grid = TensorGrid.graded(model_s11, 9, layers=2)
        assert grid.cell_volumes().sum() == pytest.approx(2.0)


class TestStencils:
    """Three-point stencils are exact on quadratics, even on graded nodes"""

    @given(st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=3, max_size=12, unique=True),
           st.floats(min_value=-3.0, max_value=3.0), st.floats(min_value=-3.0, max_value=3.0))
    @settings(max_examples=40, deadline=None)
    def test_exact_on_quadratics(self, spacings, b, c):
        nodes = np.concatenate([[0.0], np.cumsum(spacings)])
        u = c * nodes ** 2 + b * nodes + 1.0
        np.testing.assert_allclose(first_derivative_matrix(nodes) @ u, 2 * c * nodes + b, atol=1e-6)
        np.testing.assert_allclose(second_derivative_matrix(nodes) @ u, np.full(nodes.size, 2 * c), atol=1e-4)

    def test_stencil_cache_is_shared_across_threads(self, model_1d):
        grid = TensorGrid.graded(model_1d, 23, layers=2)
        with ThreadPoolExecutor(max_workers=4) as pool:
            sets = list(pool.map(lambda _: stencils_for(grid), range(8)))
        assert all(s is sets[0] for s in sets)
        assert stencils_for(TensorGrid.graded(model_1d, 23, layers=2)) is sets[0]

    def test_field_derivative(self, grid_1d):
        field = Field.from_function(grid_1d, lambda p: p[:, 0] ** 2)
        np.testing.assert_allclose(field.derivative((1,)).flat, 2.0 * grid_1d.points[:, 0], atol=1e-10)

    def test_derivative_orders_checked(self, grid_1d):
        field = Field.from_function(grid_1d, lambda p: p[:, 0])
        with pytest.raises(ContractError):
            field.derivative((1, 0))

    def test_field_interpolation(self, grid_s20):
        field = Field.from_function(grid_s20, lambda p: 2.0 * p[:, 0] - p[:, 1])
        np.testing.assert_allclose(field.at([[0.3, 0.7]]), [-0.1], atol=1e-12)


class TestBoundaryMasks:
    def test_tangent_and_outer_faces(self, model_1d, grid_1d):
        mask = dirichlet_mask(model_1d, grid_1d)
        assert mask.sum() == 2
        assert mask[0] and mask[-1]
        assert tangent_face_mask(model_1d, grid_1d).sum() == 1

    def test_transverse_face_is_free(self):
        op = builtin_operator('model-1d-weighted')
        grid = TensorGrid.graded(op, 17, layers=2)
        mask = dirichlet_mask(op, grid)
        assert not mask[0] and mask[-1]
        assert not tangent_face_mask(op, grid).any()

    def test_identity_rows(self, model_1d, grid_1d):
        matrix = discretize(model_1d, grid_1d)
        assert matrix[0, 0] == 1.0 and matrix[0, 1] == 0.0

    def test_grid_operator_mismatch(self, model_1d, grid_s20):
        with pytest.raises(ContractError):
            dirichlet_mask(model_1d, grid_s20)


class TestSolveIvp:
    def test_snapshot_bookkeeping(self, model_1d_trajectory):
        traj = model_1d_trajectory
        assert len(traj) == 101
        assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(1.0)
        assert traj.scheme['scheme'] == 'implicit-euler'
        assert traj.scheme['steps'] == 500
        assert traj.stacked().shape == (101, traj.grid.size)

    def test_positivity_and_decay(self, model_1d_trajectory):
        sups = [float(np.max(s)) for s in model_1d_trajectory.snapshots]
        assert min(float(np.min(s)) for s in model_1d_trajectory.snapshots) >= -1e-12
        assert all(b <= a + 1e-12 for a, b in zip(sups, sups[1:]))

    def test_eigen_solution(self, kimura_classical):
        grid = TensorGrid.uniform(kimura_classical, 33)
        traj = solve_ivp(kimura_classical, grid, eigen_exact(0.0, grid.points), t_end=0.5, dt=1e-3,
                         save_every=100)
        error = traj.final().flat - eigen_exact(0.5, grid.points)
        assert np.max(np.abs(error)) < 1e-6
        assert traj.scheme['rannacher']

    def test_source_term(self, model_1d, grid_1d):
        # u = t x (1 - x) solves u_t = x u'' + x (1 - x) + 2 t x exactly in space and time
        source = lambda t, p: p[:, 0] * (1.0 - p[:, 0]) + 2.0 * t * p[:, 0]
        traj = solve_ivp(model_1d, grid_1d, np.zeros(grid_1d.size), t_end=0.2, dt=0.01, source=source,
                         save_every=20)
        expected = 0.2 * grid_1d.points[:, 0] * (1.0 - grid_1d.points[:, 0])
        np.testing.assert_allclose(traj.final().flat, expected, atol=1e-8)

    def test_step_adjusted_to_land_on_end(self, model_1d, grid_1d):
        traj = solve_ivp(model_1d, grid_1d, np.zeros(grid_1d.size), t_end=0.1, dt=0.03)
        assert traj.times[-1] == pytest.approx(0.1)
        assert traj.scheme['dt'] == pytest.approx(0.1 / 3)

    def test_tangent_face_data_rejected(self, model_1d, grid_1d):
        with pytest.raises(ContractError):
            solve_ivp(model_1d, grid_1d, np.ones(grid_1d.size), t_end=0.1, dt=0.01)

    def test_transverse_face_data_accepted(self):
        op = builtin_operator('model-1d-weighted')
        grid = TensorGrid.graded(op, 17, layers=2)
        traj = solve_ivp(op, grid, 1.0 - grid.points[:, 0], t_end=0.05, dt=0.01, scheme='implicit-euler')
        assert traj.final().flat[0] > 0.0

    def test_bad_scheme_and_step(self, model_1d, grid_1d):
        zeros = np.zeros(grid_1d.size)
        with pytest.raises(ContractError):
            solve_ivp(model_1d, grid_1d, zeros, t_end=0.1, dt=0.01, scheme='rk4')
        with pytest.raises(ContractError):
            solve_ivp(model_1d, grid_1d, zeros, t_end=0.1, dt=0.0)
        with pytest.raises(ContractError):
            solve_ivp(model_1d, grid_1d, np.zeros(3), t_end=0.1, dt=0.01)

    def test_unreachable_tolerance_stagnates(self, model_1d, grid_1d):
        u0 = grid_1d.points[:, 0] * (1.0 - grid_1d.points[:, 0])
        with pytest.raises(LinearSolveStagnation, match='stagnated') as info:
            solve_ivp(model_1d, grid_1d, u0, t_end=0.01, dt=0.01, scheme='implicit-euler', tol=-1.0)
        trace = info.value.trace
        assert len(trace) == MAX_REFINEMENTS
        assert all(np.isfinite(r) and r >= 0.0 for r in trace)
        assert trace[-1] < 1e-6


class TestLinearStructure:
    """The discrete flow is linear in the data and order-preserving under implicit Euler"""

    @staticmethod
    def coarse(op):
        return TensorGrid.graded(op, 17, layers=3)

    @given(st.lists(st.floats(min_value=0.0, max_value=2.0), min_size=3, max_size=3),
           st.floats(min_value=-1.0, max_value=1.0))
    @settings(max_examples=15, deadline=None)
    def test_comparison_principle(self, coefficients, shift):
        op = builtin_operator('model-1d')
        grid = self.coarse(op)
        x = grid.points[:, 0]
        bump = x * (1.0 - x)
        lower = bump * (shift + np.cos(3.0 * x))
        gap = bump * sum(c * x ** k for k, c in enumerate(coefficients))
        kwargs = dict(t_end=0.2, dt=0.01, scheme='implicit-euler', save_every=4)
        low = solve_ivp(op, grid, lower, **kwargs).stacked()
        high = solve_ivp(op, grid, lower + gap, **kwargs).stacked()
        scale = max(1.0, float(np.max(np.abs(high))))
        assert np.min(high - low) >= -1e-9 * scale

    @pytest.mark.parametrize('scheme', ['implicit-euler', 'crank-nicolson'])
    def test_linear_in_the_data(self, scheme):
        op = builtin_operator('model-1d')
        grid = self.coarse(op)
        x = grid.points[:, 0]
        first, second = x * (1.0 - x), x * (1.0 - x) ** 2 * np.sin(4.0 * x)
        kwargs = dict(t_end=0.2, dt=0.01, scheme=scheme, save_every=5)
        combined = solve_ivp(op, grid, 2.0 * first - 3.0 * second, **kwargs).stacked()
        expected = (2.0 * solve_ivp(op, grid, first, **kwargs).stacked()
                    - 3.0 * solve_ivp(op, grid, second, **kwargs).stacked())
        np.testing.assert_allclose(combined, expected, atol=1e-9)

    def test_source_enters_linearly(self, model_1d):
        grid = self.coarse(model_1d)
        x = grid.points[:, 0]
        source = lambda t, p: p[:, 0] * (1.0 - p[:, 0])
        kwargs = dict(t_end=0.1, dt=0.01, save_every=10)
        zero_data = solve_ivp(model_1d, grid, np.zeros(grid.size), source=source, **kwargs).final().flat
        no_source = solve_ivp(model_1d, grid, x * (1.0 - x), **kwargs).final().flat
        both = solve_ivp(model_1d, grid, x * (1.0 - x), source=source, **kwargs).final().flat
        np.testing.assert_allclose(both, zero_data + no_source, atol=1e-9)


class TestTrajectory:
    def test_times_must_increase(self, grid_1d):
        with pytest.raises(ContractError):
            Trajectory(grid_1d, (0.0, 0.0), [np.zeros(grid_1d.size)] * 2)

    def test_nearest_and_scaled(self, model_1d_trajectory):
        snapshot = model_1d_trajectory.nearest(0.503)
        assert snapshot.time == pytest.approx(0.5)
        doubled = model_1d_trajectory.scaled(2.0)
        np.testing.assert_allclose(doubled.final().values, 2.0 * model_1d_trajectory.final().values)


class TestConvergence:
    def test_fitted_order(self):
        assert fitted_order([0.1, 0.05, 0.025], [1e-2, 2.5e-3, 6.25e-4]) == pytest.approx(2.0)
        assert fitted_order([0.1, 0.05], [0.0, 0.0]) is None

    @pytest.mark.slow
    def test_crank_nicolson_is_second_order(self, kimura_classical):
        grids = [TensorGrid.uniform(kimura_classical, n) for n in (17, 33, 65)]
        result = convergence_study(kimura_classical, eigen_exact, grids, t_end=0.5)
        assert result.sup_order == pytest.approx(2.0, abs=0.2)
        assert result.sup_errors[-1] < result.sup_errors[0]
        assert [row['nodes'] for row in result.rows()] == ['17', '33', '65']

    def test_implicit_euler_is_first_order(self, kimura_classical):
        grids = [TensorGrid.uniform(kimura_classical, n) for n in (17, 33)]
        result = convergence_study(kimura_classical, eigen_exact, grids, t_end=0.5, scheme='implicit-euler')
        assert result.sup_order == pytest.approx(1.0, abs=0.2)


class TestEnergy:
    def test_weighted_l2(self, model_1d, grid_1d):
        measure = WeightedMeasure(model_1d)
        assert weighted_l2(np.zeros(grid_1d.size), grid_1d, measure) == 0.0
        assert weighted_l2(np.ones(grid_1d.size), grid_1d, measure) == float('inf')

    def test_energy_constant_is_moderate(self, model_1d, model_1d_trajectory):
        report = energy_check(model_1d_trajectory, model_1d)
        assert not report.divergent
        assert report.sup_l2 == pytest.approx(report.data_norm, rel=1e-2)
        assert 1.0 - 1e-9 <= report.constant <= 2.0
        assert report.source_norm == 0.0

    def test_source_norm(self, model_1d, model_1d_trajectory):
        report = energy_check(model_1d_trajectory, model_1d, g=lambda t, p: p[:, 0] * (1.0 - p[:, 0]))
        assert report.source_norm > 0.0
        assert report.to_dict()['divergent'] is False
