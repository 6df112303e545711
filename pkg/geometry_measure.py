"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Geometry and Measure
Intrinsic metric, corner boxes, parabolic cylinders, weight densities,
singular-weight quadrature and the supremum envelope
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field as SchemaField
from scipy.special import roots_jacobi, roots_legendre

from operator_core import ContractError

logger = logging.getLogger(__name__)

CONVERGENT = 'CONVERGENT'
DIVERGENT = 'DIVERGENT'
CYLINDER_VARIANTS = ('centered', 'plus', 'minus')


class DomainError(ValueError):
    """Raised for points outside the closed corner domain"""


class MalformedMeasureError(ValueError):
    """Raised when a non-critical axis carries a non-integrable exponent"""


class QuadratureSpec(BaseModel):
    """Per-axis quadrature layout and the divergence protocol"""
    model_config = ConfigDict(extra='forbid', frozen=True)

    layers: int = SchemaField(40, ge=1, le=80)
    ratio: float = SchemaField(0.5, gt=0.0, lt=1.0)
    nodes_per_cell: int = SchemaField(6, ge=1, le=40)
    uniform_cells: int = SchemaField(8, ge=1)
    eps_exponents: Tuple[int, ...] = SchemaField((3, 4, 5, 6, 7, 8, 9), min_length=3)
    divergence_tol: float = SchemaField(0.02, gt=0.0, lt=1.0)

    def digest(self):
        return hashlib.md5(self.model_dump_json().encode()).hexdigest()


DEFAULT_QUADRATURE = QuadratureSpec()


@dataclass(frozen=True)
class CornerBox:
    """[0, R_1) x ... x [0, R_n) x (c_1 - R, c_1 + R) x ... x (c_m - R, c_m + R)"""
    n: int
    m: int
    x_extent: Tuple[float, ...]
    y_center: Tuple[float, ...] = ()
    y_radius: float = 1.0

    def __post_init__(self):
        if len(self.x_extent) != self.n or len(self.y_center) != self.m:
            raise ContractError("box extents do not match the dimensions")
        if any(r <= 0 for r in self.x_extent) or (self.m and self.y_radius <= 0):
            raise ContractError("box side lengths must be positive")

    @property
    def dim(self):
        return self.n + self.m

    @property
    def bounds(self):
        return ([(0.0, float(r)) for r in self.x_extent]
                + [(c - self.y_radius, c + self.y_radius) for c in self.y_center])

    @property
    def radius(self):
        return min(list(self.x_extent) + ([self.y_radius] if self.m else []))

    def contains(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.ones(points.shape[0], dtype=bool)
        for k, (lo, hi) in enumerate(self.bounds):
            if k < self.n:
                inside &= (points[:, k] >= lo) & (points[:, k] < hi)
            else:
                inside &= (points[:, k] > lo) & (points[:, k] < hi)
        return inside


@dataclass(frozen=True)
class RectRegion:
    """Closed coordinate rectangle given by per-axis bounds"""
    n: int
    bounds: Tuple[Tuple[float, float], ...]

    def contains(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.ones(points.shape[0], dtype=bool)
        for k, (lo, hi) in enumerate(self.bounds):
            inside &= (points[:, k] >= lo) & (points[:, k] <= hi)
        return inside


def coordinate_box_mask(points, center, r, n=None):
    """Membership in B_r(z0): |x_i - x0_i| < r, |y_l - y0_l| < r, x_i >= 0"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    center = np.asarray(center, dtype=float)
    n = points.shape[1] if n is None else n
    inside = np.all(np.abs(points - center) < r, axis=1)
    return inside & np.all(points[:, :n] >= 0.0, axis=1)


def coordinate_box_region(center, r, n):
    """The closure of B_r(z0) as a rectangle clipped to x >= 0"""
    center = [float(c) for c in center]
    bounds = tuple((max(0.0, c - r), c + r) if k < n else (c - r, c + r)
                   for k, c in enumerate(center))
    return RectRegion(n, bounds)


def _check_domain(points, n):
    if np.any(points[..., :n] < 0.0):
        raise DomainError("x-coordinates must be nonnegative")


def rho(z, z2, n=None):
    """Intrinsic distance (sum_i |sqrt x_i - sqrt x'_i|^2 + |y - y'|^2)^(1/2)"""
    z = np.asarray(z, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    n = z.shape[-1] if n is None else n
    _check_domain(z, n)
    _check_domain(z2, n)
    dx = np.sqrt(z[..., :n]) - np.sqrt(z2[..., :n])
    dy = z[..., n:] - z2[..., n:]
    value = np.sqrt(np.sum(dx ** 2, axis=-1) + np.sum(dy ** 2, axis=-1))
    return float(value) if np.ndim(value) == 0 else value


def a_r_point(z, r, n):
    """Interior point A_r(z) shifted by r^2/(4n) on x-axes and r/(2 sqrt m) on y-axes"""
    if r <= 0:
        raise ContractError("radius must be positive")
    z = np.asarray(z, dtype=float)
    m = z.shape[-1] - n
    shifted = z.copy()
    if n:
        shifted[:n] += r ** 2 / (4.0 * n)
    if m:
        shifted[n:] += r / (2.0 * np.sqrt(m))
    assert rho(z, shifted, n) < r, "A_r must lie in the intrinsic ball"
    return shifted


@dataclass(frozen=True)
class ParabolicCylinder:
    """Q_r, Q_r^+ or Q_r^- anchored at (t, z)"""
    t: float
    z: Tuple[float, ...]
    r: float
    n: int
    variant: str = 'centered'

    def __post_init__(self):
        if self.variant not in CYLINDER_VARIANTS:
            raise ContractError(f"unknown cylinder variant '{self.variant}'")
        if self.r <= 0:
            raise ContractError("cylinder radius must be positive")

    @property
    def time_interval(self):
        r2 = self.r ** 2
        if self.variant == 'plus':
            return (self.t + r2, self.t + 2.0 * r2)
        if self.variant == 'minus':
            return (self.t - 3.0 * r2, self.t - 2.0 * r2)
        return (self.t - r2, self.t)

    def with_variant(self, variant):
        return ParabolicCylinder(self.t, self.z, self.r, self.n, variant)

    @property
    def anchor(self):
        return a_r_point(self.z, self.r, self.n)

    def contains_time(self, times, closed=False):
        times = np.asarray(times, dtype=float)
        lo, hi = self.time_interval
        if closed:
            return (times >= lo) & (times <= hi)
        return (times > lo) & (times < hi)

    def contains_points(self, points):
        return rho(np.atleast_2d(points), np.asarray(self.z, dtype=float), self.n) < self.r

    def contains(self, times, points):
        """Mask of shape (len(times), len(points))"""
        return np.outer(self.contains_time(times), self.contains_points(points))


def weight_wT(op, z):
    """prod_{i<=n0} 1/x_i, infinite on the tangent faces"""
    points = np.atleast_2d(np.asarray(z, dtype=float))
    _check_domain(points, op.n)
    tangent = points[:, :op.n0]
    with np.errstate(divide='ignore'):
        values = np.prod(np.where(tangent > 0.0, 1.0 / np.where(tangent > 0.0, tangent, 1.0), np.inf), axis=1)
    return float(values[0]) if np.ndim(z) == 1 else values


def weight_wPitch(op, z):
    """prod_{j>n0} x_j^(b_j(z) - 1)"""
    points = np.atleast_2d(np.asarray(z, dtype=float))
    _check_domain(points, op.n)
    values = np.ones(points.shape[0])
    with np.errstate(divide='ignore'):
        for j in range(op.n0, op.n):
            values = values * np.power(points[:, j], op.b[j](points) - 1.0)
    return float(values[0]) if np.ndim(z) == 1 else values


class WeightedMeasure:
    """
    Density of d(mu_a) = prod_i x_i^(s_i(z)) dx dy with s_i = a_i - 1 on the
    tangent block and s_i = b_i(z) + a_i - 1 elsewhere
    """

    def __init__(self, op, multi_index=None):
        self.op = op
        self.multi_index = tuple(int(v) for v in (multi_index or (0,) * op.n))
        if len(self.multi_index) != op.n or any(v < 0 for v in self.multi_index):
            raise ContractError(f"multi-index {self.multi_index} does not fit n={op.n}")

    @classmethod
    def tilde(cls, op):
        """Measure of the conjugated operator, x_i^(+1) on the tangent block"""
        return cls(op, tuple(2 if i < op.n0 else 0 for i in range(op.n)))

    def shifted(self, extra):
        return WeightedMeasure(self.op, tuple(a + e for a, e in zip(self.multi_index, extra)))

    def exponents(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((points.shape[0], self.op.n))
        for i in range(self.op.n):
            if i < self.op.n0:
                out[:, i] = self.multi_index[i] - 1.0
            else:
                out[:, i] = self.op.b[i](points) + self.multi_index[i] - 1.0
        return out

    def is_critical(self, axis):
        return axis < self.op.n0 and self.multi_index[axis] == 0

    def density(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        _check_domain(points, self.op.n)
        with np.errstate(divide='ignore'):
            return np.prod(np.power(points[:, :self.op.n], self.exponents(points)), axis=1)

    def base_exponents(self, bounds, samples=9):
        """Smallest exponent per x-axis over a sample lattice of the region"""
        points = _sample_box(bounds, samples)
        return self.exponents(points).min(axis=0)

    def describe(self):
        return {'multi_index': list(self.multi_index), 'n0': self.op.n0}


def _sample_box(bounds, samples):
    axes = [np.linspace(lo, hi, samples) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.stack([g.ravel() for g in mesh], axis=-1)


@dataclass(frozen=True)
class IntegralResult:
    """Value of a weighted integral or a divergence flag"""
    status: str
    value: float
    spec_digest: str
    log_slope: Optional[float] = None
    partials: Tuple[float, ...] = ()
    eps: Tuple[float, ...] = ()
    detail: str = ''

    @property
    def divergent(self):
        return self.status == DIVERGENT

    def to_dict(self):
        return {'status': self.status, 'value': self.value, 'log_slope': self.log_slope,
                'partials': list(self.partials), 'eps': list(self.eps),
                'spec_digest': self.spec_digest, 'detail': self.detail}


def _gauss_legendre(a, b, count):
    t, w = roots_legendre(count)
    return 0.5 * (a + b) + 0.5 * (b - a) * t, 0.5 * (b - a) * w


def axis_rule(lo, hi, exponent, spec=DEFAULT_QUADRATURE):
    """Nodes and weights for the integral of f(x) x^s over (lo, hi)"""
    if hi <= lo:
        return np.empty(0), np.empty(0)
    nodes, weights = [], []
    if lo == 0.0:
        if exponent <= -1.0:
            raise MalformedMeasureError(f"exponent {exponent} is not integrable at the face")
        breaks = hi * spec.ratio ** np.arange(spec.layers + 1)
        inner = breaks[-1]
        t, w = roots_jacobi(spec.nodes_per_cell, 0.0, exponent)
        nodes.append(0.5 * inner * (1.0 + t))
        weights.append((0.5 * inner) ** (exponent + 1.0) * w)
    else:
        count = max(1, int(np.ceil(np.log(lo / hi) / np.log(spec.ratio))))
        breaks = np.append(hi * spec.ratio ** np.arange(count), lo)
    for b, a in zip(breaks[:-1], breaks[1:]):
        x, w = _gauss_legendre(a, b, spec.nodes_per_cell)
        nodes.append(x)
        weights.append(w * np.power(x, exponent))
    return np.concatenate(nodes), np.concatenate(weights)


def uniform_rule(lo, hi, spec=DEFAULT_QUADRATURE):
    if hi <= lo:
        return np.empty(0), np.empty(0)
    edges = np.linspace(lo, hi, spec.uniform_cells + 1)
    parts = [_gauss_legendre(a, b, spec.nodes_per_cell) for a, b in zip(edges[:-1], edges[1:])]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def product_rule(bounds, exponents, n, spec=DEFAULT_QUADRATURE):
    """Tensor quadrature; exponents[k] weights x-axis k by x^s"""
    rules = [axis_rule(lo, hi, exponents[k], spec) if k < n else uniform_rule(lo, hi, spec)
             for k, (lo, hi) in enumerate(bounds)]
    mesh = np.meshgrid(*[r[0] for r in rules], indexing='ij')
    points = np.stack([g.ravel() for g in mesh], axis=-1)
    weights = np.ones(1)
    for _, w in rules:
        weights = np.multiply.outer(weights, w).ravel()
    return points, weights


def _exponent_correction(points, exponents, base, n):
    """prod_k x_k^(s_k(z) - s0_k), taken as 1 on the faces"""
    x = points[:, :n]
    safe = np.where(x > 0.0, x, 1.0)
    return np.prod(np.power(safe, exponents - np.asarray(base)[None, :]), axis=1)


def _evaluate(f, points):
    values = f(points)
    return np.broadcast_to(np.asarray(values, dtype=float), (points.shape[0],))


def integrate(f, measure, region=None, quadrature=None, mask=None):
    """
    Integral of f against the measure over a box region. Axes carrying the
    critical exponent -1 down to the face go through the epsilon protocol:
    partial integrals over [eps, R] either saturate (CONVERGENT, with the
    tail extrapolated) or keep growing (DIVERGENT, with the log slope).
    """
    spec = quadrature or DEFAULT_QUADRATURE
    if hasattr(f, 'grid') and hasattr(f, 'values'):
        if region is not None and mask is None:
            mask = region.contains(f.grid.points)
        return field_integral(f.values, f.grid, measure, mask=mask, quadrature=spec)

    op = measure.op
    n = op.n
    region = region or op.box
    bounds = [tuple(map(float, b)) for b in region.bounds]
    base = measure.base_exponents(bounds)
    critical = [k for k in range(n) if measure.is_critical(k) and bounds[k][0] == 0.0]
    for k in range(n):
        if k not in critical and bounds[k][0] == 0.0 and base[k] <= -1.0:
            raise MalformedMeasureError(f"axis x_{k + 1} has exponent {base[k]:.4g} <= -1")

    def partial(box):
        points, weights = product_rule(box, base, n, spec)
        if points.shape[0] == 0:
            return 0.0
        correction = _exponent_correction(points, measure.exponents(points), base, n)
        return float(np.sum(weights * correction * _evaluate(f, points)))

    digest = spec.digest()
    if not critical:
        return IntegralResult(CONVERGENT, partial(bounds), digest)

    eps = [10.0 ** (-k) for k in spec.eps_exponents]
    partials = []
    for e in eps:
        box = [(e, hi) if k in critical else (lo, hi) for k, (lo, hi) in enumerate(bounds)]
        partials.append(partial(box))
    return _epsilon_verdict(partials, eps, spec, digest)


def _epsilon_verdict(partials, eps, spec, digest):
    partials = np.asarray(partials, dtype=float)
    increments = np.diff(partials)
    window = min(4, len(partials))
    logs = np.log(1.0 / np.asarray(eps[-window:]))
    slope = float(np.polyfit(logs, partials[-window:], 1)[0])
    first = increments[-(window - 1)]
    last = increments[-1]
    saturating = abs(last) < (1.0 - spec.divergence_tol) * abs(first) or abs(last) <= 1e-14 * max(1.0, abs(partials[-1]))
    if not saturating:
        logger.debug("partial integrals keep growing, log slope %.4f", slope)
        return IntegralResult(DIVERGENT, float(np.inf), digest, slope, tuple(partials), tuple(eps),
                              'partial integrals grow without saturation')
    ratio = last / increments[-2] if len(increments) > 1 and increments[-2] != 0 else 0.0
    tail = last * ratio / (1.0 - ratio) if 0.0 <= ratio < 1.0 else 0.0
    return IntegralResult(CONVERGENT, float(partials[-1] + tail), digest, slope, tuple(partials), tuple(eps),
                          'extrapolated from partial integrals')


def _primitives(x, s):
    """P = int x^s, Q = int x^(s+1)"""
    with np.errstate(divide='ignore', invalid='ignore'):
        if abs(s + 1.0) < 1e-12:
            p = np.log(x)
        else:
            p = np.power(x, s + 1.0) / (s + 1.0)
        q = np.power(x, s + 2.0) / (s + 2.0)
    return p, q


def hat_weights(nodes, exponent):
    """Integrals of the piecewise-linear hat functions against x^s; inf where the face weight diverges"""
    nodes = np.asarray(nodes, dtype=float)
    s = float(exponent)
    weights = np.zeros(nodes.size)
    if nodes.size < 2:
        return weights
    a, b = nodes[:-1], nodes[1:]
    h = b - a
    face = a == 0.0
    a_safe = np.where(face, b, a)
    pa, qa = _primitives(a_safe, s)
    pb, qb = _primitives(b, s)
    rising = (qb - qa - a * (pb - pa)) / h
    falling = (b * (pb - pa) - (qb - qa)) / h
    if np.any(face):
        bf = b[face]
        if s <= -2.0:
            raise MalformedMeasureError(f"exponent {s} is not integrable against a hat at the face")
        rising[face] = np.power(bf, s + 1.0) / (s + 2.0)
        falling[face] = np.inf if s <= -1.0 else np.power(bf, s + 1.0) / ((s + 1.0) * (s + 2.0))
    weights[1:] += rising
    weights[:-1] += falling
    return weights


def nodal_weights(grid, measure, extra_powers=None):
    """Flat nodal weights of the measure times prod x_i^(extra_i) on a tensor grid"""
    n = measure.op.n
    extra = np.zeros(n) if extra_powers is None else np.asarray(extra_powers, dtype=float)
    points = grid.points
    exponents = measure.exponents(points) + extra[None, :]
    base = exponents.min(axis=0) if points.shape[0] else np.zeros(n)
    weights = np.ones(1)
    for k, nodes in enumerate(grid.axes):
        w = hat_weights(nodes, base[k] if k < n else 0.0)
        weights = np.multiply.outer(weights, w).ravel()
    with np.errstate(invalid='ignore'):
        correction = _exponent_correction(points, exponents, base, n)
        return np.where(np.isinf(weights), np.inf, weights * correction)


def field_integral(values, grid, measure, extra_powers=None, mask=None, quadrature=None):
    """Nodal product integration of grid values against the exact singular weight"""
    spec = quadrature or DEFAULT_QUADRATURE
    values = np.asarray(values, dtype=float).ravel()
    weights = nodal_weights(grid, measure, extra_powers)
    if mask is not None:
        values = np.where(np.asarray(mask).ravel(), values, 0.0)
    infinite = np.isinf(weights)
    if np.any(infinite & (values != 0.0)):
        return IntegralResult(DIVERGENT, float(np.inf), spec.digest(),
                              detail='nonzero values on a face with divergent weight')
    total = float(np.sum(np.where(infinite, 0.0, weights) * values))
    return IntegralResult(CONVERGENT, total, spec.digest())


def project_tangent(z, block=None, n0=None):
    """pi(z, rho): replace the first n0 x-coordinates by the block"""
    z = np.array(z, dtype=float)
    n0 = len(block) if n0 is None and block is not None else n0
    if n0 is None:
        raise ContractError("projection needs n0")
    block = np.zeros(n0) if block is None else np.asarray(block, dtype=float)
    if block.shape != (n0,):
        raise ContractError(f"block has length {block.size}, expected {n0}")
    z[:n0] = block
    return z


def project_tangent_k(z, k, block=None, n0=None):
    """pi_k(z, eta): keep x_k (1-based) and replace the other tangent coordinates"""
    if n0 is None:
        raise ContractError("projection needs n0")
    if not 1 <= k <= n0:
        raise ContractError(f"index {k} outside 1..{n0}")
    z = np.array(z, dtype=float)
    block = np.zeros(n0 - 1) if block is None else np.asarray(block, dtype=float)
    if block.shape != (n0 - 1,):
        raise ContractError(f"block has length {block.size}, expected {n0 - 1}")
    others = [i for i in range(n0) if i != k - 1]
    z[others] = block
    return z


@dataclass(frozen=True)
class EnvelopeResult:
    """W_{r0}(z) for one exponent p"""
    value: float
    p: float
    q: float
    divergent_axis: Optional[int] = None

    @property
    def divergent(self):
        return self.divergent_axis is not None


def sup_envelope(op, z, r0, p=4.0, transverse=None, quadrature=None):
    """
    Rectangle integral over R_{r0}(z) = prod (z_k, r0) with exponents -q/p on
    the tangent block and -(b_j + delta_jl) q/p on the positive-weight block,
    raised to the power 1/q. Axis indices in the result are 1-based.
    """
    spec = quadrature or DEFAULT_QUADRATURE
    if p <= 2.0:
        raise ContractError("envelope exponent p must exceed 2")
    if r0 >= op.box.radius:
        raise ContractError("r0 must be smaller than the box radius")
    if transverse is not None and not op.n0 < transverse <= op.n:
        raise ContractError(f"transverse index {transverse} outside {op.n0 + 1}..{op.n}")
    q = p / (p - 1.0)
    z = np.asarray(z, dtype=float)
    _check_domain(z, op.n)
    bounds = [(float(z[k]), float(r0)) for k in range(op.dim)]
    if any(hi <= lo for lo, hi in bounds):
        return EnvelopeResult(0.0, p, q)

    def exponents(points):
        out = np.empty((points.shape[0], op.n))
        for i in range(op.n):
            if i < op.n0:
                out[:, i] = -q / p
            else:
                shift = 1.0 if transverse == i + 1 else 0.0
                out[:, i] = -(op.b[i](points) + shift) * q / p
        return out

    base = exponents(_sample_box(bounds, 9)).min(axis=0)
    for k in range(op.n):
        if bounds[k][0] == 0.0 and base[k] <= -1.0:
            logger.debug("envelope axis x_%d diverges with exponent %.4g", k + 1, base[k])
            return EnvelopeResult(float(np.inf), p, q, divergent_axis=k + 1)
    points, weights = product_rule(bounds, base, op.n, spec)
    correction = _exponent_correction(points, exponents(points), base, op.n)
    total = float(np.sum(weights * correction))
    return EnvelopeResult(total ** (1.0 / q), p, q)
