"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Solver
Tensor grids, nonuniform stencils, the operator matrix and theta-scheme
time stepping for u_t = Lu with Dirichlet data on the tangent faces only
"""

import hashlib
import logging
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.integrate import trapezoid
from scipy.sparse.linalg import splu

from geometry_measure import WeightedMeasure, field_integral
from operator_core import ContractError

logger = logging.getLogger(__name__)

SOLVE_TOL = 1e-10
MAX_REFINEMENTS = 6
SCHEMES = {'implicit-euler': 1.0, 'crank-nicolson': 0.5}


class LinearSolveStagnation(RuntimeError):
    """Raised when iterative refinement cannot reach the residual tolerance"""

    def __init__(self, message, trace):
        super().__init__(f"{message}; residual trace {['%.3e' % r for r in trace]}")
        self.trace = list(trace)


class TensorGrid:
    """Tensor-product nodes; the first n axes are degenerate x-axes starting at 0"""

    def __init__(self, axes, n):
        self.axes = tuple(np.asarray(a, dtype=float) for a in axes)
        self.n = int(n)
        self.m = len(self.axes) - self.n
        for k, nodes in enumerate(self.axes):
            if nodes.size < 3:
                raise ContractError(f"axis {k + 1} needs at least 3 nodes")
            if np.any(np.diff(nodes) <= 0.0):
                raise ContractError(f"axis {k + 1} nodes are not strictly increasing")
            if k < self.n and nodes[0] != 0.0:
                raise ContractError(f"x-axis {k + 1} must start exactly at 0")

    @classmethod
    def graded(cls, op, nodes=65, layers=10, ratio=0.5, y_nodes=None):
        """Uniform nodes with `layers` geometric nodes inserted into the first x-cell"""
        axes = []
        for r in op.x_extent:
            base = np.linspace(0.0, r, nodes)
            h = base[1]
            inserted = h * ratio ** np.arange(1, layers + 1)
            axes.append(np.sort(np.concatenate([base, inserted])))
        for c in op.y_center:
            axes.append(np.linspace(c - op.y_radius, c + op.y_radius, y_nodes or nodes))
        return cls(axes, op.n)

    @classmethod
    def uniform(cls, op, nodes=65, y_nodes=None):
        return cls.graded(op, nodes, layers=0, y_nodes=y_nodes)

    @property
    def dim(self):
        return len(self.axes)

    @property
    def shape(self):
        return tuple(a.size for a in self.axes)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def kinds(self):
        return tuple('x' if k < self.n else 'y' for k in range(self.dim))

    @property
    def max_spacing(self):
        return max(float(np.max(np.diff(a))) for a in self.axes)

    @cached_property
    def points(self):
        mesh = np.meshgrid(*self.axes, indexing='ij')
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def cell_volumes(self):
        """Dual-cell volumes of the nodes (trapezoid weights)"""
        volumes = np.ones(1)
        for nodes in self.axes:
            h = np.diff(nodes)
            w = np.zeros(nodes.size)
            w[:-1] += 0.5 * h
            w[1:] += 0.5 * h
            volumes = np.multiply.outer(volumes, w).ravel()
        return volumes

    def axis_index(self, axis, value):
        """Index of the node nearest to value on an axis"""
        return int(np.argmin(np.abs(self.axes[axis] - value)))

    def signature(self):
        digest = hashlib.md5(b''.join(a.tobytes() for a in self.axes)).hexdigest()
        return {'shape': list(self.shape), 'n': self.n, 'm': self.m,
                'min_spacing': min(float(np.min(np.diff(a))) for a in self.axes),
                'max_spacing': self.max_spacing, 'digest': digest}

    def __eq__(self, other):
        return (isinstance(other, TensorGrid) and self.n == other.n and len(self.axes) == len(other.axes)
                and all(np.array_equal(a, b) for a, b in zip(self.axes, other.axes)))

    def __hash__(self):
        return hash(self.signature()['digest'])


def first_derivative_matrix(nodes):
    """Second-order three-point first derivative, one-sided at both ends"""
    x = np.asarray(nodes, dtype=float)
    k = x.size
    rows, cols, vals = [], [], []
    h = np.diff(x)
    hm, hp = h[:-1], h[1:]
    interior = np.arange(1, k - 1)
    for offset, coef in ((-1, -hp / (hm * (hm + hp))),
                         (0, (hp - hm) / (hm * hp)),
                         (1, hm / (hp * (hm + hp)))):
        rows.append(interior)
        cols.append(interior + offset)
        vals.append(coef)
    h1, h2 = h[0], h[1]
    rows.append(np.zeros(3, dtype=int))
    cols.append(np.array([0, 1, 2]))
    vals.append(np.array([-(2 * h1 + h2) / (h1 * (h1 + h2)), (h1 + h2) / (h1 * h2), -h1 / (h2 * (h1 + h2))]))
    h1, h2 = h[-1], h[-2]
    rows.append(np.full(3, k - 1))
    cols.append(np.array([k - 3, k - 2, k - 1]))
    vals.append(np.array([h1 / (h2 * (h1 + h2)), -(h1 + h2) / (h1 * h2), (2 * h1 + h2) / (h1 * (h1 + h2))]))
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(k, k))


def second_derivative_matrix(nodes):
    """Three-point second derivative; end rows from the square of the first derivative"""
    x = np.asarray(nodes, dtype=float)
    k = x.size
    h = np.diff(x)
    hm, hp = h[:-1], h[1:]
    interior = np.arange(1, k - 1)
    matrix = sparse.lil_matrix((k, k))
    matrix[interior, interior - 1] = 2.0 / (hm * (hm + hp))
    matrix[interior, interior] = -2.0 / (hm * hp)
    matrix[interior, interior + 1] = 2.0 / (hp * (hm + hp))
    d1 = first_derivative_matrix(x)
    square = (d1 @ d1).tolil()
    matrix[0, :] = square[0, :]
    matrix[k - 1, :] = square[k - 1, :]
    return matrix.tocsr()


def axis_operator(grid, axis, matrix):
    """Lift a 1-D matrix to the flattened (C-order) tensor grid"""
    out = None
    for k, nodes in enumerate(grid.axes):
        factor = matrix if k == axis else sparse.identity(nodes.size, format='csr')
        out = factor if out is None else sparse.kron(out, factor, format='csr')
    return out.tocsr()


class StencilSet:
    """First and second derivative operators on every axis of a grid"""

    def __init__(self, grid):
        self.grid = grid
        self.d1 = [axis_operator(grid, k, first_derivative_matrix(a)) for k, a in enumerate(grid.axes)]
        self.d2 = [axis_operator(grid, k, second_derivative_matrix(a)) for k, a in enumerate(grid.axes)]

    def derivative(self, orders):
        """Operator for D^orders, orders[k] in {0, 1, 2}"""
        result = sparse.identity(self.grid.size, format='csr')
        for k, order in enumerate(orders):
            if order == 1:
                result = self.d1[k] @ result
            elif order == 2:
                result = self.d2[k] @ result
            elif order != 0:
                raise ContractError(f"derivative order {order} not supported")
        return result.tocsr()

    def mixed(self, i, j):
        return self.d2[i] if i == j else (self.d1[i] @ self.d1[j]).tocsr()


_STENCIL_CACHE: Dict[str, StencilSet] = {}
_STENCIL_LOCK = threading.Lock()


def stencils_for(grid):
    key = grid.signature()['digest']
    with _STENCIL_LOCK:
        if key not in _STENCIL_CACHE:
            _STENCIL_CACHE[key] = StencilSet(grid)
        return _STENCIL_CACHE[key]


@dataclass
class Field:
    """Node values on a grid, optionally time-stamped"""
    grid: TensorGrid
    values: np.ndarray
    time: Optional[float] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise ContractError("field values must be finite")

    @classmethod
    def from_function(cls, grid, func, time=None):
        return cls(grid, np.asarray(func(grid.points), dtype=float).reshape(grid.shape), time)

    @property
    def flat(self):
        return self.values.ravel()

    def at(self, points):
        """Multilinear interpolation at arbitrary points of the box"""
        interpolator = RegularGridInterpolator(self.grid.axes, self.values, bounds_error=False, fill_value=None)
        return interpolator(np.atleast_2d(np.asarray(points, dtype=float)))

    def derivative(self, orders):
        """Stencil derivative D^orders as a new field"""
        if len(orders) != self.grid.dim:
            raise ContractError("derivative orders must list every axis")
        values = stencils_for(self.grid).derivative(orders) @ self.flat
        return Field(self.grid, values, self.time)

    def scaled(self, factor):
        return Field(self.grid, factor * self.values, self.time)

    def __add__(self, other):
        return Field(self.grid, self.values + other.values, self.time)


@dataclass
class Trajectory:
    """Saved snapshots of one solve with scheme metadata"""
    grid: TensorGrid
    times: Tuple[float, ...]
    snapshots: List[np.ndarray]
    scheme: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = tuple(float(t) for t in self.times)
        if len(self.times) != len(self.snapshots):
            raise ContractError("every snapshot needs a time stamp")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ContractError("snapshot times must be strictly increasing")
        self.snapshots = [np.asarray(s, dtype=float).reshape(self.grid.shape) for s in self.snapshots]

    def __len__(self):
        return len(self.times)

    @property
    def fields(self):
        return [Field(self.grid, s, t) for t, s in zip(self.times, self.snapshots)]

    def stacked(self):
        return np.stack([s.ravel() for s in self.snapshots])

    def nearest(self, t):
        idx = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return Field(self.grid, self.snapshots[idx], self.times[idx])

    def scaled(self, factor):
        return Trajectory(self.grid, self.times, [factor * s for s in self.snapshots], dict(self.scheme))

    def final(self):
        return Field(self.grid, self.snapshots[-1], self.times[-1])


def _check_grid(op, grid):
    if grid.n != op.n or grid.m != op.m:
        raise ContractError(f"grid has (n, m) = ({grid.n}, {grid.m}), operator needs ({op.n}, {op.m})")


def dirichlet_mask(op, grid):
    """Tangent-face nodes plus the outer box faces"""
    _check_grid(op, grid)
    points = grid.points
    mask = np.zeros(grid.size, dtype=bool)
    for i in range(op.n):
        if i < op.n0:
            mask |= points[:, i] == 0.0
        mask |= points[:, i] == grid.axes[i][-1]
    for l in range(op.n, op.dim):
        mask |= (points[:, l] == grid.axes[l][0]) | (points[:, l] == grid.axes[l][-1])
    return mask


def tangent_face_mask(op, grid):
    points = grid.points
    mask = np.zeros(grid.size, dtype=bool)
    for i in range(op.n0):
        mask |= points[:, i] == 0.0
    return mask


def operator_matrix(op, grid):
    """Stencil matrix of L on every node, without boundary rows"""
    _check_grid(op, grid)
    stencils = stencils_for(grid)
    points = grid.points
    coeff = op.coefficient_arrays(points)
    n = op.n
    x = points[:, :n]
    terms = []

    def add(weights, matrix):
        if np.any(weights != 0.0):
            terms.append(sparse.diags(weights) @ matrix)

    for i in range(n):
        add(x[:, i] * coeff['abar'][:, i], stencils.d2[i])
        add(coeff['b'][:, i], stencils.d1[i])
        for j in range(n):
            add(x[:, i] * x[:, j] * coeff['a'][:, i, j], stencils.mixed(i, j))
        for l in range(op.m):
            add(x[:, i] * coeff['c_mix'][:, i, l], stencils.mixed(i, n + l))
    for l in range(op.m):
        add(coeff['e'][:, l], stencils.d1[n + l])
        for k in range(op.m):
            add(coeff['d'][:, l, k], stencils.mixed(n + l, n + k))
    add(coeff['c0'], sparse.identity(grid.size, format='csr'))
    if not terms:
        return sparse.csr_matrix((grid.size, grid.size))
    matrix = terms[0]
    for term in terms[1:]:
        matrix = matrix + term
    logger.debug("assembled %s on %s: %d nonzeros", op.name, grid.shape, matrix.nnz)
    return matrix.tocsr()


def _interior_matrix(op, grid):
    mask = dirichlet_mask(op, grid)
    keep = sparse.diags((~mask).astype(float))
    return (keep @ operator_matrix(op, grid)).tocsr(), mask


def discretize(op, grid):
    """Operator matrix with identity rows on the tangent and outer faces"""
    interior, mask = _interior_matrix(op, grid)
    return (interior + sparse.diags(mask.astype(float))).tocsr()


class _Factorized:
    """splu factorization with iterative refinement to a relative residual"""

    def __init__(self, matrix, tol=SOLVE_TOL):
        self.matrix = matrix.tocsc()
        self.lu = splu(self.matrix)
        self.tol = tol

    def solve(self, rhs):
        norm = np.linalg.norm(rhs)
        if norm == 0.0:
            return np.zeros_like(rhs)
        x = self.lu.solve(rhs)
        trace = []
        for _ in range(MAX_REFINEMENTS):
            residual = rhs - self.matrix @ x
            trace.append(np.linalg.norm(residual) / norm)
            if trace[-1] <= self.tol:
                return x
            x = x + self.lu.solve(residual)
        raise LinearSolveStagnation("linear solve stagnated", trace)


def _source_vector(source, t, grid, mask):
    if source is None:
        return 0.0
    values = np.asarray(source(t, grid.points), dtype=float).ravel()
    return np.where(mask, 0.0, values)


def solve_ivp(op, grid, u0, t_end, dt, scheme='crank-nicolson', save_every=1, source=None,
              rannacher=True, tol=SOLVE_TOL):
    """
    Advance (I - theta dt A) u^{k+1} = (I + (1 - theta) dt A) u^k with
    theta = 1 (implicit Euler) or 1/2 (Crank-Nicolson). Crank-Nicolson
    starts with two implicit-Euler half steps unless rannacher is off.
    """
    if scheme not in SCHEMES:
        raise ContractError(f"unknown scheme '{scheme}'; choose from {sorted(SCHEMES)}")
    if dt <= 0.0 or t_end < 0.0 or save_every < 1:
        raise ContractError("dt and save_every must be positive and t_end nonnegative")
    _check_grid(op, grid)
    values = u0.flat.copy() if isinstance(u0, Field) else np.asarray(u0, dtype=float).ravel().copy()
    if values.size != grid.size:
        raise ContractError("initial data does not match the grid")
    tangent = tangent_face_mask(op, grid)
    scale = max(1.0, float(np.max(np.abs(values))) if values.size else 1.0)
    if np.any(np.abs(values[tangent]) > 1e-12 * scale):
        raise ContractError("initial data must vanish on the tangent faces")

    interior, mask = _interior_matrix(op, grid)
    values[mask] = 0.0
    steps = int(round(t_end / dt)) if t_end > 0 else 0
    if steps and abs(steps * dt - t_end) > 1e-12 * max(1.0, t_end):
        dt = t_end / steps
        logger.info("time step adjusted to %.6g to land on t_end", dt)

    theta = SCHEMES[scheme]
    identity = sparse.identity(grid.size, format='csr')
    keep = (~mask).astype(float)

    def stepper(theta_, dt_):
        lhs = _Factorized(identity - theta_ * dt_ * interior, tol)
        rhs = (sparse.diags(keep) @ (identity + (1.0 - theta_) * dt_ * interior)).tocsr()

        def step(u, t):
            b = rhs @ u
            if source is not None:
                b = b + dt_ * (theta_ * _source_vector(source, t + dt_, grid, mask)
                               + (1.0 - theta_) * _source_vector(source, t, grid, mask))
            return lhs.solve(b)
        return step

    main = stepper(theta, dt)
    half = stepper(1.0, 0.5 * dt) if (theta < 1.0 and rannacher and steps) else None

    times, snapshots = [0.0], [values.copy()]
    t = 0.0
    for k in range(1, steps + 1):
        if k == 1 and half is not None:
            values = half(half(values, t), t + 0.5 * dt)
        else:
            values = main(values, t)
        t = k * dt
        if k % save_every == 0 or k == steps:
            times.append(t)
            snapshots.append(values.copy())
    logger.info("solved %s: %d steps of %s, dt=%.3g, %d snapshots", op.name, steps, scheme, dt, len(times))
    metadata = {'scheme': scheme, 'theta': theta, 'dt': dt, 'steps': steps, 'save_every': save_every,
                'rannacher': bool(half is not None), 'solve_tol': tol, 'operator': op.name}
    return Trajectory(grid, times, snapshots, metadata)


def weighted_l2(values, grid, measure):
    """L2(d mu) norm of grid values; inf when the face weight diverges"""
    result = field_integral(np.asarray(values, dtype=float) ** 2, grid, measure)
    return float(np.sqrt(result.value)) if not result.divergent else float('inf')


def fitted_order(spacings, errors):
    """Least-squares slope of log error against log h"""
    spacings = np.asarray(spacings, dtype=float)
    errors = np.asarray(errors, dtype=float)
    usable = errors > 0.0
    if usable.sum() < 2:
        return None
    return float(np.polyfit(np.log(spacings[usable]), np.log(errors[usable]), 1)[0])


@dataclass
class ConvergenceResult:
    """Per-grid errors and the fitted orders"""
    nodes: List[Tuple[int, ...]]
    spacings: List[float]
    dts: List[float]
    sup_errors: List[float]
    l2_errors: List[float]
    sup_order: Optional[float]
    l2_order: Optional[float]

    def rows(self):
        return [{'nodes': 'x'.join(map(str, n)), 'h': h, 'dt': dt, 'sup_error': s, 'l2_error': l}
                for n, h, dt, s, l in zip(self.nodes, self.spacings, self.dts, self.sup_errors, self.l2_errors)]


def convergence_study(op, exact, grids, dt_rule=None, t_end=1.0, scheme='crank-nicolson'):
    """
    Solve from exact(0, .) on each grid and measure errors against
    exact(t_end, .). dt_rule maps a grid to its time step, default dt = h.
    """
    dt_rule = dt_rule or (lambda g: g.max_spacing)
    measure = WeightedMeasure(op)
    result = ConvergenceResult([], [], [], [], [], None, None)
    for grid in grids:
        u0 = np.asarray(exact(0.0, grid.points), dtype=float)
        dt = dt_rule(grid)
        traj = solve_ivp(op, grid, u0, t_end, dt, scheme=scheme, save_every=max(1, int(round(t_end / dt))))
        error = traj.snapshots[-1].ravel() - np.asarray(exact(t_end, grid.points), dtype=float)
        result.nodes.append(grid.shape)
        result.spacings.append(grid.max_spacing)
        result.dts.append(float(traj.scheme['dt']))
        result.sup_errors.append(float(np.max(np.abs(error))))
        result.l2_errors.append(weighted_l2(error, grid, measure))
        logger.info("grid %s: sup error %.3e", grid.shape, result.sup_errors[-1])
    result.sup_order = fitted_order(result.spacings, result.sup_errors)
    result.l2_order = fitted_order(result.spacings, result.l2_errors)
    return result


@dataclass
class EnergyReport:
    """Energy quantities of one trajectory and the fitted constant"""
    sup_l2: float
    h1_time_integral: float
    data_norm: float
    source_norm: float
    constant: Optional[float]
    divergent: bool

    def to_dict(self):
        return dict(self.__dict__)


def energy_check(traj, op, grid=None, f=None, g=None):
    """
    sup_t |u(t)|_{L2(d mu)} and int |u|^2_{H1(d mu)} dt against |f| + |g|,
    where |g| is the L2(0, T; L2(d mu)) norm of the source
    """
    from forms import h1_norm

    grid = grid or traj.grid
    measure = WeightedMeasure(op)
    f_values = traj.snapshots[0] if f is None else (f.values if isinstance(f, Field) else np.asarray(f))
    data_norm = weighted_l2(f_values, grid, measure)
    l2 = [weighted_l2(s, grid, measure) for s in traj.snapshots]
    h1 = [h1_norm(Field(grid, s), op, grid) for s in traj.snapshots]
    source_norm = 0.0
    if g is not None:
        g_l2 = [weighted_l2(np.asarray(g(t, grid.points)), grid, measure) ** 2 for t in traj.times]
        source_norm = float(np.sqrt(trapezoid(g_l2, traj.times))) if len(traj.times) > 1 else 0.0
    divergent = not (np.isfinite(data_norm) and all(np.isfinite(l2)) and all(np.isfinite(h1)))
    h1_integral = float(trapezoid(np.square(h1), traj.times)) if len(traj.times) > 1 else 0.0
    sup_l2 = float(max(l2))
    denominator = data_norm + source_norm
    if divergent:
        constant = None
    elif denominator == 0.0:
        constant = 0.0
    else:
        constant = max(sup_l2, float(np.sqrt(h1_integral))) / denominator
    return EnergyReport(sup_l2, h1_integral, data_norm, source_norm, constant, divergent)
