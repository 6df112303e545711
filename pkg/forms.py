"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Forms
Discrete weighted bilinear forms, the H1(d mu) norm, the commutator
identity and empirical continuity, Garding and Hardy constants
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import scipy.sparse as sparse
from scipy.io import mmwrite
from scipy.optimize import linprog
import sympy as sp

from geometry_measure import CONVERGENT, DIVERGENT, IntegralResult, WeightedMeasure, field_integral, nodal_weights
from operator_core import ContractError, Jet, apply_pointwise, jet_from_expr
from solver import Field, TensorGrid, operator_matrix, stencils_for, tangent_face_mask

logger = logging.getLogger(__name__)

FORM_KINDS = ('qsym', 'full', 'mass', 'h1', 'v_residual')
SYMMETRY_TOL = 1e-12
C3_MAX = 1e3
BUMP_RADIUS = 0.8


@dataclass(frozen=True)
class DiscreteForm:
    """Matrix M of a bilinear form in grid unknowns, value(u, v) = u^T M v"""
    grid: TensorGrid
    matrix: sparse.csr_matrix
    measure: Dict
    kind: str
    operator: str = 'custom'

    def __post_init__(self):
        if self.kind not in FORM_KINDS:
            raise ContractError(f"unknown form kind '{self.kind}'")

    def value(self, u, v=None):
        u = _flat(u, self.grid)
        v = u if v is None else _flat(v, self.grid)
        return float(u @ (self.matrix @ v))

    def asymmetry(self):
        """max |M - M^T| relative to max |M|"""
        if self.matrix.nnz == 0:
            return 0.0
        difference = abs(self.matrix - self.matrix.T).max()
        return float(difference / abs(self.matrix).max())

    def is_symmetric(self, tol=SYMMETRY_TOL):
        return self.asymmetry() <= tol

    def export(self, path):
        """Matrix Market coordinate file"""
        if not str(path).endswith('.mtx'):
            path = f'{path}.mtx'
        comment = f"{self.kind} form of {self.operator} on grid {self.grid.signature()['digest']}"
        mmwrite(path, self.matrix, comment=comment)
        logger.debug("exported %s form (%d nonzeros) to %s", self.kind, self.matrix.nnz, path)
        return path


def _flat(u, grid):
    values = u.flat if isinstance(u, Field) else np.asarray(u, dtype=float).ravel()
    if values.size != grid.size:
        raise ContractError("grid function does not match the form's grid")
    return values


def _unit(n, *axes):
    out = np.zeros(n)
    for k in axes:
        out[k] += 1.0
    return out


def _finite_weights(op, grid, measure, extra=None):
    """Nodal weights restricted to the Dirichlet class: divergent face weights multiply zeros"""
    weights = nodal_weights(grid, measure, extra)
    infinite = np.isinf(weights)
    assert not np.any(infinite & ~tangent_face_mask(op, grid)), "divergent weight away from the tangent faces"
    return np.where(infinite, 0.0, weights)


def _gradient_form(op, grid, measure, density_terms):
    """sum over (p, q, density, extra) of D_p^T diag(w_extra * density) D_q, symmetrized"""
    stencils = stencils_for(grid)
    matrix = sparse.csr_matrix((grid.size, grid.size))
    for p, q, density, extra in density_terms:
        if not np.any(density != 0.0):
            continue
        weights = _finite_weights(op, grid, measure, extra) * density
        matrix = matrix + stencils.d1[p].T @ sparse.diags(weights) @ stencils.d1[q]
    return (0.5 * (matrix + matrix.T)).tocsr()


def _qsym_terms(op, grid):
    coeff = op.coefficient_arrays(grid.points)
    n, m = op.n, op.m
    terms = []
    for i in range(n):
        terms.append((i, i, coeff['abar'][:, i], _unit(n, i)))
        for j in range(n):
            terms.append((i, j, coeff['a'][:, i, j], _unit(n, i, j)))
        for l in range(m):
            half = 0.5 * coeff['c_mix'][:, i, l]
            terms.append((i, n + l, half, _unit(n, i)))
            terms.append((n + l, i, half, _unit(n, i)))
    for l in range(m):
        for k in range(m):
            terms.append((n + l, n + k, 0.5 * (coeff['d'][:, l, k] + coeff['d'][:, k, l]), _unit(n)))
    return terms


def assemble_qsym(op, grid, measure=None):
    """
    Q_sym(u, v) = int [sum_i x_i abar u_i v_i + sum_ij x_i x_j a_ij u_i v_j
                       + 1/2 sum_il x_i c_il (u_i v_l + u_l v_i) + sum_lk d_lk u_l v_k] d mu
    with the x-powers folded into the singular nodal weights
    """
    measure = measure or WeightedMeasure(op)
    matrix = _gradient_form(op, grid, measure, _qsym_terms(op, grid))
    logger.debug("assembled Q_sym for %s: %d nonzeros", op.name, matrix.nnz)
    return DiscreteForm(grid, matrix, measure.describe(), 'qsym', op.name)


def assemble_mass(op, grid, measure=None):
    measure = measure or WeightedMeasure(op)
    weights = _finite_weights(op, grid, measure)
    return DiscreteForm(grid, sparse.diags(weights).tocsr(), measure.describe(), 'mass', op.name)


def assemble_h1(op, grid, measure=None):
    """Q_sym + mass"""
    measure = measure or WeightedMeasure(op)
    matrix = assemble_qsym(op, grid, measure).matrix + assemble_mass(op, grid, measure).matrix
    return DiscreteForm(grid, matrix.tocsr(), measure.describe(), 'h1', op.name)


def assemble_q(op, grid, measure=None):
    """Q(u, v) = -(Lu, v)_{L2(d mu)} with the solver's stencil matrix"""
    measure = measure or WeightedMeasure(op)
    weights = _finite_weights(op, grid, measure)
    matrix = -(operator_matrix(op, grid).T @ sparse.diags(weights))
    return DiscreteForm(grid, matrix.tocsr(), measure.describe(), 'full', op.name)


def assemble_v_residual(op, grid, measure=None):
    """The first-order remainder Q - Q_sym + (c0 u, v)"""
    measure = measure or WeightedMeasure(op)
    weights = _finite_weights(op, grid, measure)
    c0 = op.c0(grid.points)
    matrix = (assemble_q(op, grid, measure).matrix - assemble_qsym(op, grid, measure).matrix
              + sparse.diags(weights * c0))
    return DiscreteForm(grid, matrix.tocsr(), measure.describe(), 'v_residual', op.name)


def _plain_h1_form(op, grid, measure):
    """sum_i x_i |u_i|^2 + sum_l |u_l|^2 + |u|^2 on Dirichlet-class unknowns"""
    n = op.n
    terms = [(i, i, np.ones(grid.size), _unit(n, i)) for i in range(n)]
    terms += [(n + l, n + l, np.ones(grid.size), _unit(n)) for l in range(op.m)]
    matrix = _gradient_form(op, grid, measure, terms) + sparse.diags(_finite_weights(op, grid, measure))
    return matrix.tocsr()


def h1_integral(u, op, grid=None, measure=None):
    """int [sum_i x_i |u_i|^2 + sum_l |u_l|^2 + |u|^2] d mu, DIVERGENT when u misses the tangent zeros"""
    grid = grid or u.grid
    measure = measure or WeightedMeasure(op)
    u = u if isinstance(u, Field) else Field(grid, u)
    n = op.n
    parts = [field_integral(u.values ** 2, grid, measure)]
    for k in range(grid.dim):
        orders = tuple(1 if j == k else 0 for j in range(grid.dim))
        gradient = u.derivative(orders).values
        extra = _unit(n, k) if k < n else None
        parts.append(field_integral(gradient ** 2, grid, measure, extra_powers=extra))
    digest = parts[0].spec_digest
    if any(p.divergent for p in parts):
        return IntegralResult(DIVERGENT, float('inf'), digest, detail='|u|^2 d mu diverges at a tangent face')
    return IntegralResult(CONVERGENT, float(sum(p.value for p in parts)), digest)


def h1_norm(u, op, grid=None, measure=None):
    result = h1_integral(u, op, grid, measure)
    if result.divergent:
        logger.debug("H1 norm diverges for %s", op.name)
        return float('inf')
    return float(np.sqrt(max(result.value, 0.0)))


def dirichlet_test_fields(op, grid, count, seed, degree=3):
    """
    Random polynomials times prod_{i<=n0} x_i times a smooth bump that
    vanishes near the outer box faces
    """
    if count < 0 or degree < 0:
        raise ContractError("count and degree must be nonnegative")
    rng = np.random.default_rng(seed)
    points = grid.points
    scaled = np.empty_like(points)
    for i, r in enumerate(op.x_extent):
        scaled[:, i] = points[:, i] / r
    for l, c in enumerate(op.y_center):
        scaled[:, op.n + l] = (points[:, op.n + l] - c) / op.y_radius
    radius = np.max(np.abs(scaled), axis=1)
    bump = (1.0 - np.minimum(radius / BUMP_RADIUS, 1.0) ** 2) ** 3
    vanishing = np.prod(scaled[:, :op.n0], axis=1)
    monomials = [p for p in itertools.product(range(degree + 1), repeat=grid.dim) if sum(p) <= degree]
    basis = np.stack([np.prod(scaled ** np.asarray(p), axis=1) for p in monomials], axis=1)
    fields = []
    for _ in range(count):
        coefficients = rng.standard_normal(len(monomials))
        fields.append(Field(grid, (basis @ coefficients) * vanishing * bump))
    return fields


@dataclass
class GardingResult:
    """Largest c2 <= 1 and smallest c3 >= 0 with Q(u,u) >= c2 |u|_H1^2 - c3 |u|_L2^2 on every probe"""
    c2: Optional[float]
    c3: Optional[float]
    feasible: bool
    binding_probe: Optional[int]
    probes: int
    vacuous_probes: int
    detail: str = ''

    def to_dict(self):
        return dict(self.__dict__)


def garding_probe(op, grid, trials, seed, degree=3):
    """Two linear programs over (c2, c3): maximize c2, then minimize c3 at that c2"""
    if trials < 1:
        raise ContractError("the Garding probe needs at least one trial")
    measure = WeightedMeasure(op)
    q_form = assemble_q(op, grid, measure)
    h1 = _plain_h1_form(op, grid, measure)
    mass = assemble_mass(op, grid, measure).matrix
    rows, indices = [], []
    for k, u in enumerate(dirichlet_test_fields(op, grid, trials, seed, degree)):
        values = u.flat
        norm_h1 = float(values @ (h1 @ values))
        if norm_h1 <= 0.0:
            continue
        rows.append((norm_h1, float(values @ (mass @ values)), q_form.value(values)))
        indices.append(k)
    vacuous = trials - len(rows)
    if not rows:
        return GardingResult(1.0, 0.0, True, None, trials, vacuous, 'every probe is the zero field')

    h, l, q = (np.asarray(col) for col in zip(*rows))
    a_ub = np.column_stack([np.ones_like(h), -l / h])
    b_ub = q / h
    first = linprog([-1.0, 0.0], A_ub=a_ub, b_ub=b_ub, bounds=[(-C3_MAX, 1.0), (0.0, C3_MAX)], method='highs')
    if first.status != 0:
        return GardingResult(None, None, False, None, trials, vacuous, first.message)
    c2 = float(first.x[0])
    second = linprog([0.0, 1.0], A_ub=a_ub, b_ub=b_ub, bounds=[(c2 - 1e-9, 1.0), (0.0, C3_MAX)], method='highs')
    c3 = float(second.x[1]) if second.status == 0 else float(first.x[1])
    slack = b_ub - a_ub @ np.array([c2, c3])
    binding = indices[int(np.argmin(slack))]
    feasible = c2 > 0.0
    if not feasible:
        logger.warning("Garding probe for %s needs c2 = %.4g; probe %d is the witness", op.name, c2, binding)
    return GardingResult(c2, c3, feasible, binding, trials, vacuous,
                         '' if feasible else 'no positive c2 fits the probes')


@dataclass
class ContinuityResult:
    """Empirical c1 with |Q(u,v)| <= c1 |u|_H1 |v|_H1 over probe pairs"""
    c1: float
    pairs: int
    worst_pair: Optional[tuple] = None
    ratios: List[float] = field(default_factory=list)

    def to_dict(self):
        return {'c1': self.c1, 'pairs': self.pairs, 'worst_pair': self.worst_pair}


def continuity_probe(op, grid, trials, seed, degree=3):
    measure = WeightedMeasure(op)
    q_form = assemble_q(op, grid, measure)
    h1 = _plain_h1_form(op, grid, measure)
    fields = dirichlet_test_fields(op, grid, 2 * trials, seed, degree)
    ratios, worst, best = [], None, 0.0
    for k in range(trials):
        u, v = fields[2 * k].flat, fields[2 * k + 1].flat
        scale = np.sqrt(float(u @ (h1 @ u)) * float(v @ (h1 @ v)))
        if scale <= 0.0:
            continue
        for first, second, pair in ((u, v, (2 * k, 2 * k + 1)), (v, u, (2 * k + 1, 2 * k))):
            ratio = abs(q_form.value(first, second)) / scale
            ratios.append(ratio)
            if ratio > best:
                best, worst = ratio, pair
    return ContinuityResult(best, len(ratios) // 2, worst, ratios)


def _field_jet(u, points):
    """Stencil jet of a grid field, interpolated to points"""
    grid = u.grid
    stencils = stencils_for(grid)
    dim = grid.dim
    count = points.shape[0]
    gradient = np.empty((count, dim))
    hessian = np.empty((count, dim, dim))
    for i in range(dim):
        gradient[:, i] = Field(grid, stencils.d1[i] @ u.flat).at(points)
        for j in range(i, dim):
            hessian[:, i, j] = hessian[:, j, i] = Field(grid, stencils.mixed(i, j) @ u.flat).at(points)
    return Jet(u.at(points), gradient, hessian)


def _as_jet(function, op, points):
    if isinstance(function, Jet):
        return function.checked(op.dim, points.shape[0])
    if isinstance(function, Field):
        return _field_jet(function, points)
    return jet_from_expr(function, op.symbols, points).checked(op.dim, points.shape[0])


def commutator_apply(op, phi, u, z):
    """
    [L, phi] u = u (L - c0) phi + 2 sum_i x_i abar u_i phi_i
                 + sum_ij x_i x_j a_ij (u_i phi_j + u_j phi_i)
                 + sum_il x_i c_il (u_i phi_l + u_l phi_i)
                 + sum_lk d_lk (u_l phi_k + u_k phi_l)
    phi and u may be sympy expressions, grid fields or jets
    """
    z = np.asarray(z, dtype=float)
    points = np.atleast_2d(z)
    phi_jet = _as_jet(phi, op, points)
    u_jet = _as_jet(u, op, points)
    coeff = op.coefficient_arrays(points)
    n = op.n
    x = points[:, :n]
    ux, uy = u_jet.gradient[:, :n], u_jet.gradient[:, n:]
    px, py = phi_jet.gradient[:, :n], phi_jet.gradient[:, n:]

    value = u_jet.value * (np.atleast_1d(apply_pointwise(op, phi_jet, points)) - coeff['c0'] * phi_jet.value)
    value = value + np.sum(2.0 * x * coeff['abar'] * ux * px, axis=1)
    xxa = x[:, :, None] * x[:, None, :] * coeff['a']
    value = value + np.einsum('pij,pi,pj->p', xxa, ux, px) + np.einsum('pij,pj,pi->p', xxa, ux, px)
    xc = x[:, :, None] * coeff['c_mix']
    value = value + np.einsum('pil,pi,pl->p', xc, ux, py) + np.einsum('pil,pl,pi->p', xc, uy, px)
    value = value + np.einsum('plk,pl,pk->p', coeff['d'], uy, py) + np.einsum('plk,pk,pl->p', coeff['d'], uy, py)
    return float(value[0]) if z.ndim == 1 else value


def commutator_identity_residual(op, phi_expr, u_expr, points):
    """max |L(phi u) - phi Lu - [L, phi] u| with exact jets"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    symbols = op.symbols
    phi_expr, u_expr = sp.sympify(phi_expr), sp.sympify(u_expr)
    product = jet_from_expr(phi_expr * u_expr, symbols, points)
    u_jet = jet_from_expr(u_expr, symbols, points)
    phi_values = jet_from_expr(phi_expr, symbols, points).value
    lhs = apply_pointwise(op, product, points)
    rhs = phi_values * apply_pointwise(op, u_jet, points) + commutator_apply(op, phi_expr, u_expr, points)
    return float(np.max(np.abs(np.atleast_1d(lhs) - np.atleast_1d(rhs))))


@dataclass
class HardyResult:
    """lhs <= first + C second over the test set; C is the smallest constant that works"""
    axis: int
    lhs: List[float]
    first: List[float]
    second: List[float]
    constant: float
    ratio: float
    flags: List[str] = field(default_factory=list)

    @property
    def rhs(self):
        return [f + self.constant * s for f, s in zip(self.first, self.second)]

    def to_dict(self):
        return {'axis': self.axis, 'constant': self.constant, 'ratio': self.ratio, 'fields': len(self.lhs),
                'flags': list(self.flags)}


def hardy_check(op, u, phi=None, i=None, grid=None):
    """
    int |u|^2 phi^2 d mu  <=  int [sum_j x_j |u_j|^2 + sum_l |u_l|^2] phi^2 d mu_{e_i}
                              + C int (phi^2 + |grad phi|^2) |u|^2 d mu_{e_i}
    for a transverse axis i (1-based, n0 < i <= n); u is a field or a list of fields
    """
    fields = [u] if isinstance(u, Field) else list(u)
    if not fields:
        raise ContractError("the Hardy check needs at least one field")
    grid = grid or fields[0].grid
    i = op.n0 + 1 if i is None else int(i)
    if not op.n0 < i <= op.n:
        raise ContractError(f"axis {i} is not transverse; need {op.n0} < i <= {op.n}")
    n = op.n
    measure = WeightedMeasure(op)
    shifted = WeightedMeasure(op, tuple(1 if k == i - 1 else 0 for k in range(n)))

    phi_field = Field.from_function(grid, phi) if phi is not None else Field(grid, np.ones(grid.shape))
    phi2 = phi_field.values ** 2
    grad_phi2 = np.zeros(grid.shape)
    for k in range(grid.dim):
        orders = tuple(1 if j == k else 0 for j in range(grid.dim))
        grad_phi2 += phi_field.derivative(orders).values ** 2

    lhs, first, second, flags = [], [], [], []
    for index, f in enumerate(fields):
        left = field_integral(f.values ** 2 * phi2, grid, measure)
        if left.divergent:
            flags.append(f"field {index}: |u|^2 d mu diverges, u does not vanish on the tangent faces")
            continue
        total = 0.0
        for k in range(grid.dim):
            orders = tuple(1 if j == k else 0 for j in range(grid.dim))
            gradient = f.derivative(orders).values
            extra = _unit(n, k) if k < n else None
            total += field_integral(gradient ** 2 * phi2, grid, shifted, extra_powers=extra).value
        lhs.append(left.value)
        first.append(total)
        second.append(field_integral((phi2 + grad_phi2) * f.values ** 2, grid, shifted).value)

    constant = 0.0
    for left, one, two in zip(lhs, first, second):
        if left <= one:
            continue
        if two <= 0.0:
            flags.append("excess with a vanishing second term; no finite constant")
            constant = float('inf')
            break
        constant = max(constant, (left - one) / two)
    rhs = [a + constant * b for a, b in zip(first, second)]
    ratio = max((a / r for a, r in zip(lhs, rhs) if r > 0.0), default=0.0)
    logger.debug("Hardy check on %s axis %d: C=%.4g over %d fields", op.name, i, constant, len(lhs))
    return HardyResult(i, lhs, first, second, float(constant), float(ratio), flags)
