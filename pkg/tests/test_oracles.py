"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Tests for oracles: closed-form solutions, the exact and Euler-Maruyama
samplers and the PDE-against-ensemble comparison
"""

import numpy as np
import pytest

from geometry_measure import DomainError
from operator_core import ContractError, builtin_operator, operator_from_spec
from oracles import (DEFAULT_MC_RADIUS, ScalarDiffusion, density_compare, exact_eigen_solution, expectation_fields,
                     ks_distance, mode_rate, model_moments, pde_survival, product_mode, sample_em,
                     sample_model_exact, separable_mode, standard_test_functions)
from solver import Field, TensorGrid


def half_line_operator(b):
    """x u'' + b u' on [0, 6], Dirichlet at 0 only when b = 0"""
    return operator_from_spec({'n': 1, 'm': 0, 'n0': 1 if b == 0.0 else 0, 'beta0': b or 1.0,
                               'x_extent': [DEFAULT_MC_RADIUS], 'coefficients': {'b': [b]},
                               'name': f'half-line-{b}'})


class TestClosedForms:
    def test_eigen_solution(self):
        assert exact_eigen_solution(0.0, 0.5) == pytest.approx(0.25)
        assert exact_eigen_solution(1.0, 0.5) == pytest.approx(0.25 * np.exp(-2.0))
        with pytest.raises(ContractError):
            exact_eigen_solution(-1.0, 0.5)

    def test_mode_vanishes_at_the_outer_face(self):
        assert separable_mode(0.0, 1.0) == pytest.approx(0.0, abs=1e-12)
        assert separable_mode(0.0, 0.0) == 0.0
        assert mode_rate() == pytest.approx(3.8317059702 ** 2 / 4.0)

    def test_mode_solves_the_model_equation(self):
        # x u'' = -lam u at t = 0, checked by central differences
        x, h = 0.3, 1e-4
        second = (separable_mode(0.0, x + h) - 2 * separable_mode(0.0, x) + separable_mode(0.0, x - h)) / h ** 2
        assert x * second == pytest.approx(-mode_rate() * separable_mode(0.0, x), rel=1e-5)
        assert separable_mode(0.5, x) == pytest.approx(np.exp(-0.5 * mode_rate()) * separable_mode(0.0, x))

    def test_product_mode(self):
        points = np.array([[0.3, 0.6]])
        expected = separable_mode(0.2, 0.3) * separable_mode(0.2, 0.6)
        assert product_mode(0.2, points)[0] == pytest.approx(expected)

    def test_moments(self):
        mean, second = model_moments(0.5, 0.3, 0.5)
        assert mean == pytest.approx(0.55)
        assert second - mean ** 2 == pytest.approx(2 * 0.3 * 0.5 + 0.5 * 0.25)


class TestExactSampler:
    def test_mean_matches_moments(self):
        ensemble = sample_model_exact(0.5, 0.3, 0.5, 20000, seed=1)
        mean, se = ensemble.expectation(lambda x: x)
        assert abs(mean - 0.55) < 5.0 * se
        assert ensemble.absorbed_fraction == 0.0
        assert ensemble.n_paths == 20000

    def test_absorption_probability(self):
        ensemble = sample_model_exact(0.0, 0.3, 0.5, 20000, seed=2)
        expected = np.exp(-0.6)
        se = np.sqrt(expected * (1 - expected) / 20000)
        assert abs(ensemble.absorbed_fraction - expected) < 5.0 * se
        absorbed_times = ensemble.absorption_time[ensemble.absorbed]
        assert np.all((absorbed_times > 0.0) & (absorbed_times <= 0.5))
        assert np.all(ensemble.terminal[ensemble.absorbed] == 0.0)

    def test_seeded_and_thread_independent(self):
        serial = sample_model_exact(0.5, 0.3, 0.5, 60000, seed=7, threads=1)
        pooled = sample_model_exact(0.5, 0.3, 0.5, 60000, seed=7, threads=4)
        np.testing.assert_array_equal(serial.terminal, pooled.terminal)
        other = sample_model_exact(0.5, 0.3, 0.5, 60000, seed=8, threads=1)
        assert not np.array_equal(serial.terminal, other.terminal)

    def test_time_zero(self):
        ensemble = sample_model_exact(0.5, 0.3, 0.0, 10, seed=0)
        np.testing.assert_array_equal(ensemble.terminal, np.full(10, 0.3))

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            sample_model_exact(-0.5, 0.3, 0.5, 10, seed=0)
        with pytest.raises(DomainError):
            sample_model_exact(0.5, -0.3, 0.5, 10, seed=0)

    def test_metadata(self):
        meta = sample_model_exact(0.5, 0.3, 0.5, 10, seed=3).metadata()
        assert meta['method'] == 'exact'
        assert meta['params'] == {'b': 0.5}


class TestEulerMaruyama:
    def test_diffusion_from_operator(self, model_1d):
        diffusion = ScalarDiffusion.from_operator(model_1d)
        assert diffusion.absorbing
        np.testing.assert_allclose(diffusion.variance(np.array([0.5])), [1.0])

    def test_kimura_variance(self, kimura_classical):
        diffusion = ScalarDiffusion.from_operator(kimura_classical)
        np.testing.assert_allclose(diffusion.variance(np.array([0.5])), [0.5])

    def test_operator_built_from_a_description(self):
        op = operator_from_spec({'n': 1, 'm': 0, 'n0': 0, 'beta0': 0.5, 'x_extent': [DEFAULT_MC_RADIUS],
                                 'coefficients': {'b': [0.5]}})
        diffusion = ScalarDiffusion.from_operator(op)
        assert not diffusion.absorbing
        np.testing.assert_allclose(diffusion.drift(np.array([0.2])), [0.5])
        np.testing.assert_allclose(diffusion.variance(np.array([0.5])), [1.0])

    def test_rejects_unsupported_operators(self, model_s11):
        with pytest.raises(ContractError):
            ScalarDiffusion.from_operator(model_s11)
        killed = operator_from_spec({'n': 1, 'm': 0, 'n0': 1, 'coefficients': {'c0': -0.1}})
        with pytest.raises(ContractError):
            ScalarDiffusion.from_operator(killed)

    def test_reflecting_mean(self):
        diffusion = ScalarDiffusion.from_operator(builtin_operator('model-1d-weighted'))
        assert not diffusion.absorbing
        ensemble = sample_em(diffusion, 0.3, 0.5, 1e-3, 4000, seed=4)
        mean, se = ensemble.expectation(lambda x: x)
        assert abs(mean - 0.55) < 5.0 * se + ensemble.bias_bound
        assert ensemble.dt == pytest.approx(1e-3)
        assert np.all(ensemble.terminal >= 0.0)

    def test_agrees_with_exact_sampler(self):
        diffusion = ScalarDiffusion.from_operator(half_line_operator(0.5))
        em = sample_em(diffusion, 0.3, 0.5, 1e-3, 5000, seed=5)
        exact = sample_model_exact(0.5, 0.3, 0.5, 5000, seed=6)
        assert ks_distance(em, exact) < 0.1

    def test_bad_step(self, model_1d):
        with pytest.raises(ContractError):
            sample_em(ScalarDiffusion.from_operator(model_1d), 0.3, 0.5, 0.0, 10, seed=0)


class TestDensityCompare:
    def test_test_function_family(self):
        functions = standard_test_functions(6.0, 3)
        assert [name for name, _ in functions] == ['sin1', 'sin2', 'sin3']
        assert functions[0][1](3.0) == pytest.approx(1.0)

    def test_time_mismatch(self, grid_1d):
        ensemble = sample_model_exact(0.5, 0.3, 0.25, 100, seed=0)
        functions = standard_test_functions(6.0, 1)
        fields = {'sin1': Field(grid_1d, np.zeros(grid_1d.shape), time=0.1)}
        with pytest.raises(ContractError):
            density_compare(fields, ensemble, functions)

    @pytest.mark.slow
    def test_pde_matches_exact_sampler(self):
        op = half_line_operator(0.5)
        grid = TensorGrid.graded(op, 121, layers=6)
        functions = standard_test_functions(DEFAULT_MC_RADIUS, 3)
        fields = expectation_fields(op, grid, functions, 0.25, 2.5e-3)
        ensemble = sample_model_exact(0.5, 0.3, 0.25, 20000, seed=11)
        comparison = density_compare(fields, ensemble, functions)
        assert len(comparison.rows) == 3
        assert comparison.max_z_score < 5.0
        assert comparison.max_abs_difference < 0.05

    @pytest.mark.slow
    def test_absorbed_mass(self):
        op = half_line_operator(0.0)
        grid = TensorGrid.graded(op, 241, layers=8)
        survival = pde_survival(op, grid, 0.3, 0.25, 2.5e-3)
        assert survival == pytest.approx(1.0 - np.exp(-1.2), abs=0.01)
