"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Tests for persistence
"""

import json
import os

import numpy as np
import pytest

from oracles import sample_model_exact
from persistence import (PersistenceError, load_ensemble, load_trajectory, save_ensemble, save_trajectory,
                         trajectory_cache_dir)


class TestTrajectoryFiles:
    def test_reload_preserves_snapshots(self, model_1d_trajectory, tmp_path):
        stem = str(tmp_path / 'traj')
        bin_path, json_path = save_trajectory(model_1d_trajectory, stem)
        assert os.path.exists(bin_path) and os.path.exists(json_path)

        loaded = load_trajectory(stem)
        assert loaded.grid == model_1d_trajectory.grid
        assert loaded.times == pytest.approx(model_1d_trajectory.times)
        np.testing.assert_array_equal(loaded.stacked(), model_1d_trajectory.stacked())
        assert loaded.scheme['scheme'] == 'implicit-euler'

    def test_sidecar_records_grid_and_count(self, model_1d_trajectory, tmp_path):
        _, json_path = save_trajectory(model_1d_trajectory, str(tmp_path / 'traj'))
        with open(json_path) as f:
            sidecar = json.load(f)
        assert sidecar['snapshots'] == 101
        assert sidecar['grid']['digest'] == model_1d_trajectory.grid.signature()['digest']

    def test_write_once(self, model_1d_trajectory, tmp_path):
        stem = str(tmp_path / 'traj')
        save_trajectory(model_1d_trajectory, stem)
        with pytest.raises(FileExistsError):
            save_trajectory(model_1d_trajectory, stem)

    def test_tampered_payload(self, model_1d_trajectory, tmp_path):
        stem = str(tmp_path / 'traj')
        bin_path, _ = save_trajectory(model_1d_trajectory, stem)
        with open(bin_path, 'r+b') as f:
            f.seek(-8, os.SEEK_END)
            f.write(np.float64(42.0).tobytes())
        with pytest.raises(PersistenceError):
            load_trajectory(stem)


class TestEnsembleFiles:
    def test_reload(self, tmp_path):
        ensemble = sample_model_exact(0.0, 0.3, 0.5, 500, seed=9)
        stem = str(tmp_path / 'paths')
        save_ensemble(ensemble, stem)
        loaded = load_ensemble(stem)
        np.testing.assert_array_equal(loaded.terminal, ensemble.terminal)
        np.testing.assert_array_equal(loaded.absorbed, ensemble.absorbed)
        assert loaded.absorbed_fraction == ensemble.absorbed_fraction
        assert loaded.params == {'b': 0.0}
        assert loaded.seed == 9

    def test_wrong_magic(self, model_1d_trajectory, tmp_path):
        stem = str(tmp_path / 'traj')
        save_trajectory(model_1d_trajectory, stem)
        with pytest.raises(PersistenceError):
            load_ensemble(stem)


def test_cache_dir_uses_hash_prefix():
    assert trajectory_cache_dir('out', 'abcdef0123456789') == os.path.join('out', 'cache-abcdef01')
