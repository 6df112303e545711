"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Oracles
Independent ground truth: the classical eigen-solution, separable Bessel
modes, the exact sampler of x u'' + b u' and an Euler-Maruyama fallback
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import jn_zeros, jv
from scipy.stats import ks_2samp

from geometry_measure import DomainError
from operator_core import ContractError
from solver import Field, solve_ivp

logger = logging.getLogger(__name__)

SHARD_SIZE = 25000
DEFAULT_MC_RADIUS = 6.0


@dataclass(frozen=True)
class PathEnsemble:
    """Terminal samples of one simulation with absorption bookkeeping"""
    terminal: np.ndarray
    absorbed: np.ndarray
    absorption_time: np.ndarray
    t: float
    x0: float
    seed: int
    method: str
    dt: Optional[float] = None
    bias_bound: float = 0.0
    params: Dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return int(self.terminal.size)

    @property
    def absorbed_fraction(self):
        return float(np.mean(self.absorbed)) if self.n_paths else 0.0

    def expectation(self, phi):
        """Sample mean of phi(X_t) and its standard error"""
        values = np.asarray(phi(self.terminal), dtype=float)
        mean = float(np.mean(values))
        se = float(np.std(values, ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
        return mean, se

    def metadata(self):
        return {'t': self.t, 'x0': self.x0, 'seed': self.seed, 'method': self.method, 'dt': self.dt,
                'n_paths': self.n_paths, 'bias_bound': self.bias_bound, 'params': dict(self.params)}


def exact_eigen_solution(t, x):
    """e^{-2t} x (1 - x), the decaying eigen-solution of x(1-x) u''"""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(t < 0.0) or np.any(x < 0.0) or np.any(x > 1.0):
        raise ContractError("eigen-solution needs t >= 0 and x in [0, 1]")
    value = np.exp(-2.0 * t) * x * (1.0 - x)
    return float(value) if np.ndim(value) == 0 else value


def separable_mode(t, x, R=1.0, k=1):
    """Dirichlet mode of x u'' on [0, R]: e^{-lam t} sqrt(x) J_1(2 sqrt(lam x)) / sqrt(lam)"""
    lam = jn_zeros(1, k)[-1] ** 2 / (4.0 * R)
    x = np.clip(np.asarray(x, dtype=float), 0.0, None)
    value = np.exp(-lam * np.asarray(t, dtype=float)) * np.sqrt(x) * jv(1, 2.0 * np.sqrt(lam * x)) / np.sqrt(lam)
    return float(value) if np.ndim(value) == 0 else value


def mode_rate(R=1.0, k=1):
    return float(jn_zeros(1, k)[-1] ** 2 / (4.0 * R))


def product_mode(t, points, R=1.0):
    """Product of first modes over the x-axes of each point"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return np.prod(np.stack([separable_mode(t, points[:, i], R) for i in range(points.shape[1])]), axis=0)


def model_moments(b, x0, t):
    """E[X_t] and E[X_t^2] for the generator x u'' + b u'"""
    mean = x0 + b * t
    second = x0 ** 2 + 2.0 * (b + 1.0) * x0 * t + b * (b + 1.0) * t ** 2
    return mean, second


def _worker_count(threads):
    if threads:
        return max(1, int(threads))
    return max(1, int(os.getenv('KIMURA_LAB_THREADS', '1')))


def _sharded(n_paths, seed, threads, draw):
    """Run draw(rng, size) on counter-based generators, one per shard, in shard order"""
    sizes = [SHARD_SIZE] * (n_paths // SHARD_SIZE)
    if n_paths % SHARD_SIZE:
        sizes.append(n_paths % SHARD_SIZE)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    generators = [np.random.Generator(np.random.Philox(child)) for child in children]
    with ThreadPoolExecutor(max_workers=_worker_count(threads)) as pool:
        parts = list(pool.map(draw, generators, sizes))
    if not parts:
        return np.empty(0), np.zeros(0, dtype=bool), np.empty(0)
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))


def sample_model_exact(b, x0, t, n_paths, seed, threads=None):
    """
    Time-t law of the diffusion with generator x u'' + b u'. This is a
    squared Bessel process of dimension 2b run at half speed, so
    X_t = t Gamma(b + N) with N ~ Poisson(x0 / t); when b = 0 the paths with
    N = 0 are absorbed, at time x0 / (x0/t + E) with E ~ Exp(1).
    """
    if b < 0.0:
        raise DomainError("weight b must be nonnegative")
    if x0 < 0.0:
        raise DomainError("start x0 must be nonnegative")
    if t < 0.0 or n_paths < 0:
        raise ContractError("t and n_paths must be nonnegative")

    def draw(rng, size):
        if t == 0.0:
            stuck = b == 0.0 and x0 == 0.0
            return np.full(size, float(x0)), np.full(size, stuck), np.full(size, 0.0 if stuck else np.nan)
        counts = rng.poisson(x0 / t, size)
        shape = b + counts
        positive = shape > 0
        terminal = np.where(positive, t * rng.gamma(np.where(positive, shape, 1.0)), 0.0)
        exits = rng.exponential(1.0, size)
        absorbed = (b == 0.0) & (counts == 0)
        times = np.where(absorbed, x0 / (x0 / t + exits), np.nan)
        return terminal, absorbed, times

    terminal, absorbed, times = _sharded(int(n_paths), seed, threads, draw)
    logger.debug("exact sampler: b=%.3g x0=%.3g t=%.3g, %d paths, %.4f absorbed", b, x0, t, n_paths,
                 float(np.mean(absorbed)) if n_paths else 0.0)
    return PathEnsemble(terminal, absorbed.astype(bool), times, float(t), float(x0), int(seed), 'exact',
                        params={'b': float(b)})


@dataclass(frozen=True)
class ScalarDiffusion:
    """dX = drift(X) dt + sqrt(variance(X)) dW, absorbing or reflecting at 0"""
    variance: Callable
    drift: Callable
    absorbing: bool

    @classmethod
    def from_operator(cls, op):
        """Variance 2(abar x + a x^2) and drift b of a one-dimensional operator"""
        if op.n != 1 or op.m != 0:
            raise ContractError("Euler-Maruyama needs a one-dimensional operator")
        if not op.c0.is_zero:
            raise ContractError("killing terms are not simulated; c0 must vanish")

        def column(x):
            return np.asarray(x, dtype=float).reshape(-1, 1)

        def variance(x):
            pts = column(x)
            second = pts[:, 0] * op.abar[0](pts) + pts[:, 0] ** 2 * op.a[0][0](pts)
            return np.clip(2.0 * second, 0.0, None)

        return cls(variance, lambda x: op.b[0](column(x)), op.n0 == 1)


def sample_em(diffusion, x0, t, dt, n_paths, seed, threads=None):
    """
    Euler-Maruyama with absorption at the first nonpositive step or
    reflection max(X, 0); statistics carry a bias bound sqrt(dt)
    """
    if dt <= 0.0:
        raise ContractError("dt must be positive")
    if x0 < 0.0:
        raise DomainError("start x0 must be nonnegative")
    steps = int(round(t / dt))
    if steps and abs(steps * dt - t) > 1e-12 * max(1.0, t):
        dt = t / steps

    def draw(rng, size):
        x = np.full(size, float(x0))
        alive = np.ones(size, dtype=bool)
        times = np.full(size, np.nan)
        for k in range(steps):
            idx = np.nonzero(alive)[0]
            if idx.size == 0:
                break
            xs = x[idx]
            noise = rng.standard_normal(idx.size)
            moved = xs + np.broadcast_to(diffusion.drift(xs), xs.shape) * dt \
                + np.sqrt(np.broadcast_to(diffusion.variance(xs), xs.shape) * dt) * noise
            if diffusion.absorbing:
                hit = moved <= 0.0
                moved = np.where(hit, 0.0, moved)
                alive[idx[hit]] = False
                times[idx[hit]] = (k + 1) * dt
            else:
                moved = np.maximum(moved, 0.0)
            x[idx] = moved
        return x, ~alive, times

    terminal, absorbed, times = _sharded(int(n_paths), seed, threads, draw)
    logger.debug("Euler-Maruyama: %d steps, %d paths", steps, n_paths)
    return PathEnsemble(terminal, absorbed.astype(bool), times, float(t), float(x0), int(seed), 'euler-maruyama',
                        dt=float(dt), bias_bound=float(np.sqrt(dt)))


def ks_distance(first, second):
    """Two-sample Kolmogorov-Smirnov statistic of the terminal values"""
    return float(ks_2samp(first.terminal, second.terminal).statistic)


def standard_test_functions(R=DEFAULT_MC_RADIUS, count=20):
    """sin(k pi x / R), k = 1..count"""
    return [(f'sin{k}', (lambda x, k=k: np.sin(k * np.pi * np.asarray(x, dtype=float) / R)))
            for k in range(1, count + 1)]


def _grid_function(func):
    return lambda points: func(np.asarray(points)[:, 0])


def expectation_fields(op, grid, test_functions, t, dt, scheme='crank-nicolson'):
    """u_phi(t) with u_phi(0) = phi, so u_phi(t, x0) = E_x0[phi(X_t)]"""
    fields = {}
    for name, phi in test_functions:
        u0 = Field.from_function(grid, _grid_function(phi))
        traj = solve_ivp(op, grid, u0, t, dt, scheme=scheme, save_every=max(1, int(round(t / dt))))
        fields[name] = traj.final()
    return fields


def pde_survival(op, grid, x0, t, dt, scheme='crank-nicolson'):
    """u(t, x0) for u(0) = 1 off the faces; absorbed mass is 1 - survival"""
    u0 = Field.from_function(grid, lambda p: (p[:, 0] > 0.0).astype(float))
    traj = solve_ivp(op, grid, u0, t, dt, scheme=scheme, save_every=max(1, int(round(t / dt))))
    return float(traj.final().at([[x0]])[0])


def binned_fields(op, grid, edges, t, dt, scheme='crank-nicolson'):
    """u(t) for indicator data of each bin (x = 0 excluded)"""
    fields = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        indicator = lambda p, lo=lo, hi=hi: ((p[:, 0] > max(lo, 0.0)) & (p[:, 0] <= hi)).astype(float)
        u0 = Field.from_function(grid, indicator)
        traj = solve_ivp(op, grid, u0, t, dt, scheme=scheme, save_every=max(1, int(round(t / dt))))
        fields.append(traj.final())
    return fields


@dataclass
class DensityComparison:
    """Expectation pairing of a PDE solve against an ensemble"""
    rows: List[Dict]
    max_abs_difference: float
    max_z_score: float
    within_three_se: bool
    binned_l1: Optional[float] = None

    def to_dict(self):
        return dict(self.__dict__)


def density_compare(pde_fields, ensemble, test_functions=None, bins=None, bin_fields=None, time_tol=1e-9):
    """
    Compare E[phi(X_t)] from the ensemble with u_phi(t, x0) from the PDE
    for every test function, plus a binned L1 diagnostic when indicator
    solves are supplied
    """
    test_functions = test_functions or standard_test_functions()
    rows = []
    for name, phi in test_functions:
        pde_field = pde_fields[name]
        if pde_field.time is None or abs(pde_field.time - ensemble.t) > time_tol:
            raise ContractError(f"PDE field time {pde_field.time} does not match ensemble time {ensemble.t}")
        mc_mean, se = ensemble.expectation(phi)
        pde_value = float(pde_field.at([[ensemble.x0]])[0])
        difference = abs(mc_mean - pde_value)
        z = difference / se if se > 0.0 else (0.0 if difference <= 1e-12 else float('inf'))
        rows.append({'function': name, 'mc_mean': mc_mean, 'mc_se': se, 'pde': pde_value,
                     'difference': difference, 'z_score': z})

    binned = None
    if bins is not None and bin_fields is not None:
        edges = np.asarray(bins, dtype=float)
        survivors = ensemble.terminal[~ensemble.absorbed]
        counts, _ = np.histogram(survivors[survivors > 0.0], bins=edges)
        mc = counts / max(ensemble.n_paths, 1)
        pde = np.array([float(f.at([[ensemble.x0]])[0]) for f in bin_fields])
        binned = float(np.sum(np.abs(mc - pde)))

    max_diff = max((r['difference'] for r in rows), default=0.0)
    max_z = max((r['z_score'] for r in rows), default=0.0)
    return DensityComparison(rows, max_diff, max_z, max_z <= 3.0, binned)
