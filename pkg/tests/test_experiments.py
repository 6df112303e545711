"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Tests for the experiment catalog on small grids
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from estimates_harness import FAIL, INCONCLUSIVE, PASS, VACUOUS_PASS
from experiment_config import EXPERIMENT_TAGS, ExperimentSpec, parse_config
from experiments import EXPERIMENTS, ExperimentContext, run_experiment, setting
from solver import solve_ivp

VERDICTS = (PASS, FAIL, VACUOUS_PASS, INCONCLUSIVE)
FINE_GRID = {'nodes': 65, 'layers': 6, 'refinements': [33, 65]}


def small_config(*experiments, **extra):
    raw = {
        'operator': {'builtin': 'model-1d'},
        'grid': {'nodes': 17, 'layers': 4, 'refinements': [9, 17]},
        'scheme': {'name': 'implicit-euler', 'dt': 0.01, 't_end': 1.0, 'save_every': 5},
        'experiments': list(experiments),
        'seed': 2,
    }
    raw.update(extra)
    return parse_config(raw)


def run_single(raw_spec, **extra):
    config = small_config(raw_spec, **extra)
    ctx = ExperimentContext(config)
    return run_experiment(ctx, config.experiments[0], 'abc123')


class TestCatalog:
    def test_every_tag_has_a_runner(self):
        assert set(EXPERIMENTS) == set(EXPERIMENT_TAGS)

    def test_settings_fall_back_to_defaults(self):
        spec = ExperimentSpec(tag='carleson', r=0.25)
        assert setting(spec, 'r') == 0.25
        assert setting(spec, 't') == 0.5
        assert setting(spec, 'tolerance') == 0.20


class TestContext:
    def test_trajectory_is_solved_once(self):
        ctx = ExperimentContext(small_config())
        first = ctx.trajectory()
        assert ctx.trajectory() is first
        assert first.grid.shape == (21,)
        assert first.times[-1] == pytest.approx(1.0)

    def test_concurrent_requests_solve_each_key_once(self, monkeypatch):
        calls = []

        def counting(*args, **kwargs):
            calls.append(args[1].shape)
            return solve_ivp(*args, **kwargs)

        monkeypatch.setattr('experiments.solve_ivp', counting)
        ctx = ExperimentContext(small_config())
        with ThreadPoolExecutor(max_workers=4) as pool:
            coarse = list(pool.map(lambda _: ctx.trajectory(9), range(6)))
            fine = list(pool.map(lambda _: ctx.trajectory(17), range(6)))
        assert all(t is coarse[0] for t in coarse)
        assert all(t is fine[0] for t in fine)
        assert sorted(calls) == sorted([coarse[0].grid.shape, fine[0].grid.shape])

    def test_disk_cache_is_reused(self, tmp_path):
        config = small_config()
        first = ExperimentContext(config, cache_dir=str(tmp_path)).trajectory(9)
        second = ExperimentContext(config, cache_dir=str(tmp_path)).trajectory(9)
        np.testing.assert_array_equal(first.stacked(), second.stacked())
        assert (tmp_path / 'trajectory-9-0.bin').exists()

    def test_refinement_nodes_default_to_halving(self):
        config = small_config(grid={'nodes': 33, 'layers': 4})
        assert ExperimentContext(config).refinement_nodes() == [17, 33]

    def test_expression_initial_data(self):
        config = small_config(initial_data=[{'kind': 'expression', 'expression': 'x1*(1 - x1)**2'}])
        data = ExperimentContext(config).initial_data(0)
        np.testing.assert_allclose(data(np.array([[0.5]])), [0.125])

    def test_alternate_profile_beyond_configured_data(self):
        ctx = ExperimentContext(small_config())
        points = np.array([[0.0], [0.5], [1.0]])
        values = ctx.initial_data(1)(points)
        assert values[0] == 0.0 and values[-1] == 0.0 and values[1] > 0.0


class TestExperiments:
    def test_conjugation(self):
        report = run_single({'tag': 'conjugation', 'params': {'operators': ['model-1d', 'model-s11'],
                                                              'polynomials': 3}})
        assert report.verdict == PASS
        assert report.constants['polynomials'] == 6
        assert report.config_hash == 'abc123'

    def test_commutator(self):
        report = run_single({'tag': 'commutator', 'params': {'max_degree': 2}})
        assert report.verdict == PASS
        assert report.constants['pairs'] == 9

    def test_singular_measure(self):
        report = run_single({'tag': 'singular_measure'})
        assert report.verdict == PASS
        assert report.constants['one_status'] == 'DIVERGENT'
        assert report.constants['x1_squared'] == pytest.approx(0.5, abs=1e-6)

    def test_singular_measure_without_tangent_faces(self):
        report = run_single({'tag': 'singular_measure'}, operator={'builtin': 'model-1d-weighted'})
        assert report.verdict == PASS

    def test_garding(self):
        report = run_single({'tag': 'garding', 'params': {'probes': 10}})
        assert report.verdict == PASS
        assert report.constants['min_c2'] > 0.0

    def test_maximum_principle(self):
        report = run_single({'tag': 'maximum_principle'})
        assert report.verdict == PASS
        assert len(report.series) == 2
        assert report.constants['tangent_max'] == 0.0

    def test_vanishing_exponent(self):
        report = run_single({'tag': 'vanishing_exponent', 'params': {'index': 1}})
        assert report.verdict == PASS
        assert report.constants['slope'] == pytest.approx(1.0, abs=0.05)

    def test_vanishing_exponent_of_zero_data(self):
        report = run_single({'tag': 'vanishing_exponent'},
                            initial_data=[{'kind': 'expression', 'expression': '0'}])
        assert report.verdict == VACUOUS_PASS

    @pytest.mark.parametrize('tag', ['carleson', 'hopf_oleinik'])
    def test_cylinder_ratios(self, tag):
        report = run_single({'tag': tag}, grid=FINE_GRID)
        assert not any(f.startswith('error:') for f in report.flags)
        assert report.verdict == PASS
        assert report.constants['t'] == 0.5 and report.constants['r'] == 0.3
        # two initial data on two refinement levels
        assert len(report.series) == 4
        for row in report.series:
            assert isinstance(row['nodes'], int) and row['nodes'] > 0
            assert row['grid'] in ('39', '71')
            assert row['index'] in (0, 1)

    def test_elliptic_harnack(self):
        report = run_single({'tag': 'elliptic_harnack'}, grid=FINE_GRID)
        assert not any(f.startswith('error:') for f in report.flags)
        assert report.verdict == PASS
        assert 1.0 <= report.constants['value'] < 100.0
        assert [row['grid'] for row in report.series] == ['39', '71']
        assert all(row['nodes'] > 0 for row in report.series)

    def test_elliptic_harnack_inner_box(self):
        wide = run_single({'tag': 'elliptic_harnack', 'params': {'inner': 0.75}}, grid=FINE_GRID)
        narrow = run_single({'tag': 'elliptic_harnack', 'params': {'inner': 0.25}}, grid=FINE_GRID)
        assert wide.series[-1]['nodes'] > narrow.series[-1]['nodes']
        assert wide.constants['value'] >= narrow.constants['value']

    def test_convergence_on_the_eigen_solution(self):
        report = run_single({'tag': 'convergence', 'tolerance': 1.5},
                            operator={'builtin': 'kimura-classical'},
                            grid={'nodes': 33, 'layers': 4, 'refinements': [17, 33]},
                            scheme={'name': 'crank-nicolson', 'dt': 0.01, 't_end': 1.0, 'save_every': 10},
                            initial_data=[{'kind': 'eigen'}])
        assert report.verdict == PASS
        assert report.constants['sup_order'] > 1.5
        assert report.constants['max_error'] < 1e-3
        assert report.constants['final_time'] == pytest.approx(1.0)

    @pytest.mark.parametrize('raw_spec, extra', [
        ({'tag': 'continuity', 'params': {'pairs': 5}}, {}),
        ({'tag': 'hardy', 'params': {'fields': 8}}, {'operator': {'builtin': 'model-1d-weighted'}}),
        ({'tag': 'energy'}, {}),
        ({'tag': 'derivative_bound', 'params': {'index': 1}}, {}),
        ({'tag': 'quotient'}, {}),
        ({'tag': 'holder'}, {}),
        ({'tag': 'sobolev_sup', 'params': {'multi_index': [1]}}, {}),
        ({'tag': 'envelope_scan', 'p_scan': [3.0, 6.0]}, {}),
    ], ids=lambda value: value.get('tag', '') if isinstance(value, dict) else '')
    def test_runner_measures_without_raising(self, raw_spec, extra):
        report = run_single(raw_spec, **extra)
        assert not any(f.startswith('error:') for f in report.flags), report.flags
        assert report.tag == raw_spec['tag']
        assert report.verdict in VERDICTS
        assert report.series
        assert report.config_hash == 'abc123'

    def test_hardy_needs_a_transverse_axis(self):
        report = run_single({'tag': 'hardy', 'params': {'fields': 4}})
        assert report.verdict == FAIL
        assert report.flags[0].startswith('error: ContractError')

    def test_monte_carlo_on_a_described_operator(self):
        params = {'paths': 4000, 'em_dt': 5e-3, 'pde_nodes': 65, 'pde_dt': 0.05, 'test_functions': 3,
                  'bins': 4, 'mass_tolerance': 10.0}
        report = run_single({'tag': 'monte_carlo', 'tolerance': 1.0, 'params': params})
        assert not any(f.startswith('error:') for f in report.flags), report.flags
        assert report.verdict in (PASS, FAIL)
        assert 0.0 <= report.constants['ks'] <= 1.0
        assert report.constants['mc_absorbed_mass'] == pytest.approx(np.exp(-0.6), abs=0.05)
        assert 0.0 < report.constants['pde_absorbed_mass'] < 1.0

    def test_errors_become_failures(self):
        report = run_single({'tag': 'convergence'})
        assert report.verdict == FAIL
        assert report.flags[0].startswith('error: ContractError')
        assert report.config_hash == 'abc123'
