"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Persistence
Flat binary snapshots and columnar path ensembles, each with a JSON sidecar
"""

import hashlib
import json
import logging
import os

import numpy as np

from oracles import PathEnsemble
from solver import TensorGrid, Trajectory

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b'KLSN'
ENSEMBLE_MAGIC = b'KLEN'
FORMAT_VERSION = 1
AXIS_KINDS = {'x': 0, 'y': 1}


class PersistenceError(RuntimeError):
    """Raised for unreadable or mismatched snapshot files"""


def _u4(*values):
    return np.asarray(values, dtype='<u4').tobytes()


def _write_once(path, payload):
    with open(path, 'xb') as f:
        f.write(payload)


def _write_sidecar(path, metadata):
    with open(path, 'x') as f:
        json.dump(metadata, f, indent=2, sort_keys=True)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, dtype, count):
        dtype = np.dtype(dtype)
        end = self.offset + dtype.itemsize * count
        if end > len(self.data):
            raise PersistenceError("file is truncated")
        values = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset)
        self.offset = end
        return values


def save_trajectory(traj, stem):
    """Write <stem>.bin and <stem>.json; returns both paths"""
    parts = [SNAPSHOT_MAGIC, _u4(FORMAT_VERSION, traj.grid.dim, traj.grid.n)]
    for kind, nodes in zip(traj.grid.kinds, traj.grid.axes):
        parts.append(np.asarray([AXIS_KINDS[kind]], dtype='<u1').tobytes())
        parts.append(_u4(nodes.size))
        parts.append(nodes.astype('<f8').tobytes())
    parts.append(_u4(len(traj.times)))
    parts.append(np.asarray(traj.times, dtype='<f8').tobytes())
    parts.append(traj.stacked().astype('<f8').tobytes())
    payload = b''.join(parts)

    bin_path, json_path = f'{stem}.bin', f'{stem}.json'
    _write_once(bin_path, payload)
    _write_sidecar(json_path, {'scheme': traj.scheme, 'grid': traj.grid.signature(),
                               'snapshots': len(traj.times), 'md5': hashlib.md5(payload).hexdigest()})
    logger.debug("saved %d snapshots to %s", len(traj.times), bin_path)
    return bin_path, json_path


def load_trajectory(stem):
    with open(f'{stem}.bin', 'rb') as f:
        data = f.read()
    with open(f'{stem}.json') as f:
        sidecar = json.load(f)
    if hashlib.md5(data).hexdigest() != sidecar.get('md5'):
        raise PersistenceError(f"{stem}.bin does not match its sidecar checksum")
    if data[:4] != SNAPSHOT_MAGIC:
        raise PersistenceError(f"{stem}.bin is not a snapshot file")
    reader = _Reader(data)
    reader.offset = 4
    version, dim, n = (int(v) for v in reader.take('<u4', 3))
    if version != FORMAT_VERSION:
        raise PersistenceError(f"unsupported snapshot version {version}")
    axes = []
    for _ in range(dim):
        reader.take('<u1', 1)
        count = int(reader.take('<u4', 1)[0])
        axes.append(reader.take('<f8', count).copy())
    grid = TensorGrid(axes, n)
    count = int(reader.take('<u4', 1)[0])
    times = reader.take('<f8', count).copy()
    values = reader.take('<f8', count * grid.size).reshape(count, grid.size)
    return Trajectory(grid, tuple(times), [row.copy() for row in values], sidecar.get('scheme', {}))


def save_ensemble(ensemble, stem):
    """Columnar layout: terminal f8, absorbed u1, absorption time f8"""
    payload = b''.join([
        ENSEMBLE_MAGIC, _u4(FORMAT_VERSION, ensemble.n_paths),
        ensemble.terminal.astype('<f8').tobytes(),
        ensemble.absorbed.astype('<u1').tobytes(),
        ensemble.absorption_time.astype('<f8').tobytes(),
    ])
    bin_path, json_path = f'{stem}.bin', f'{stem}.json'
    _write_once(bin_path, payload)
    _write_sidecar(json_path, dict(ensemble.metadata(), md5=hashlib.md5(payload).hexdigest()))
    return bin_path, json_path


def load_ensemble(stem):
    with open(f'{stem}.bin', 'rb') as f:
        data = f.read()
    with open(f'{stem}.json') as f:
        meta = json.load(f)
    if hashlib.md5(data).hexdigest() != meta.get('md5'):
        raise PersistenceError(f"{stem}.bin does not match its sidecar checksum")
    if data[:4] != ENSEMBLE_MAGIC:
        raise PersistenceError(f"{stem}.bin is not an ensemble file")
    reader = _Reader(data)
    reader.offset = 4
    version, count = (int(v) for v in reader.take('<u4', 2))
    if version != FORMAT_VERSION:
        raise PersistenceError(f"unsupported ensemble version {version}")
    terminal = reader.take('<f8', count).copy()
    absorbed = reader.take('<u1', count).astype(bool)
    times = reader.take('<f8', count).copy()
    return PathEnsemble(terminal, absorbed, times, meta['t'], meta['x0'], meta['seed'], meta['method'],
                        dt=meta.get('dt'), bias_bound=meta.get('bias_bound', 0.0), params=meta.get('params', {}))


def trajectory_cache_dir(out_dir, config_hash):
    return os.path.join(out_dir, f'cache-{config_hash[:8]}')
