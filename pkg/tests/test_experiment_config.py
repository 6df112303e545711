"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Tests for experiment_config
"""

import glob
import json
import os

import pytest

from experiment_config import (DEFAULT_OUTPUT_DIR, ConfigError, config_hash, dump_config, load_config, parse_config,
                               resolve_settings, with_overrides)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'configs')


def minimal(**extra):
    raw = {'operator': {'builtin': 'model-1d'}, 'experiments': [{'tag': 'energy'}]}
    raw.update(extra)
    return raw


@pytest.fixture
def clean_env(monkeypatch):
    monkeypatch.delenv('KIMURA_LAB_THREADS', raising=False)
    monkeypatch.delenv('KIMURA_LAB_OUT', raising=False)
    monkeypatch.setattr('experiment_config.DOTENV_AVAILABLE', False)
    return monkeypatch


class TestParsing:
    def test_defaults(self):
        config = parse_config(minimal())
        assert config.schema_version == 1
        assert config.grid.nodes == 65
        assert config.scheme.name == 'crank-nicolson'
        assert config.seed == 0

    def test_explicit_operator(self):
        config = parse_config(minimal(operator={'n': 1, 'm': 0, 'n0': 1, 'coefficients': {'b': [0.0]}}))
        assert config.operator.to_operator_spec()['n0'] == 1

    @pytest.mark.parametrize('raw, field', [
        (minimal(operator={'n': 1}), 'operator'),
        (minimal(experiments=[{'tag': 'telepathy'}]), 'experiments.0.tag'),
        (minimal(grid={'refinements': [33, 17]}), 'grid.refinements'),
        (minimal(experiments=[{'tag': 'envelope_scan', 'p_scan': [2.0]}]), 'experiments.0.p_scan'),
        (minimal(scheme={'dt': -1.0}), 'scheme.dt'),
        (minimal(experiments=[{'tag': 'carleson', 'r': -0.25}]), 'experiments.0.r'),
        (minimal(schema_version=2), 'schema_version'),
        (minimal(colour='blue'), 'colour'),
        (minimal(initial_data=[{'kind': 'expression'}]), 'initial_data.0'),
    ])
    def test_errors_name_the_field(self, raw, field):
        with pytest.raises(ConfigError) as excinfo:
            parse_config(raw)
        assert field in str(excinfo.value)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{"operator": ')
        with pytest.raises(ConfigError, match='invalid JSON'):
            load_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(str(tmp_path / 'absent.json'))

    @pytest.mark.parametrize('path', sorted(glob.glob(os.path.join(CONFIG_DIR, '*.json'))))
    def test_shipped_configs_load(self, path):
        assert load_config(path).experiments


class TestHashing:
    def test_stable_under_key_order(self):
        first = parse_config({'seed': 3, 'operator': {'builtin': 'model-1d'}})
        second = parse_config({'operator': {'builtin': 'model-1d'}, 'seed': 3})
        assert config_hash(first) == config_hash(second)

    def test_changes_with_content(self):
        assert config_hash(parse_config(minimal())) != config_hash(parse_config(minimal(seed=1)))

    def test_dump_reparses(self):
        config = parse_config(minimal(seed=5))
        assert config_hash(parse_config(json.loads(dump_config(config)))) == config_hash(config)


class TestOverrides:
    def test_seed_and_nodes(self):
        config = parse_config(minimal(grid={'nodes': 65, 'refinements': [17, 33, 65]}))
        changed = with_overrides(config, seed=9, grid_nodes=129)
        assert changed.seed == 9
        assert changed.grid.nodes == 129
        assert changed.grid.refinements == [65, 129]
        assert config.grid.nodes == 65

    def test_experiments_revalidated(self):
        config = parse_config(minimal())
        with pytest.raises(ConfigError):
            with_overrides(config, experiments=[{'tag': 'bogus'}])


class TestSettings:
    def test_fallback_default(self, clean_env):
        settings = resolve_settings(parse_config(minimal()))
        assert settings.threads == 1
        assert settings.output_dir == DEFAULT_OUTPUT_DIR

    def test_environment(self, clean_env):
        clean_env.setenv('KIMURA_LAB_THREADS', '4')
        clean_env.setenv('KIMURA_LAB_OUT', '/tmp/lab')
        settings = resolve_settings(parse_config(minimal()))
        assert (settings.threads, settings.output_dir) == (4, '/tmp/lab')

    def test_precedence(self, clean_env):
        clean_env.setenv('KIMURA_LAB_THREADS', '4')
        config = parse_config(minimal(threads=2, output_dir='from-config'))
        assert resolve_settings(config).threads == 2
        assert resolve_settings(config, threads=8, output_dir='flag').output_dir == 'flag'
        assert resolve_settings(config, threads=8).threads == 8

    def test_bad_thread_count(self, clean_env):
        clean_env.setenv('KIMURA_LAB_THREADS', 'many')
        with pytest.raises(ConfigError):
            resolve_settings(parse_config(minimal()))
