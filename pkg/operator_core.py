"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Operator Core
Generalized Kimura operators in normal form: coefficients, validation,
pointwise application and the tangent-weight conjugation
"""

import dataclasses
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import sympy as sp

logger = logging.getLogger(__name__)

CLEANNESS_TOL = 1e-12
NORMAL_FORM_TOL = 1e-10
SYMMETRY_TOL = 1e-12
ELLIPTICITY_TOL = 1e-12
DEFAULT_LATTICE = 33
DEFAULT_H_FD = 1e-4


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions"""


class MalformedOperatorError(ValueError):
    """Raised for operators that cannot be evaluated or fail re-validation"""


@lru_cache(maxsize=None)
def coordinate_symbols(n, m):
    """Sympy symbols x1..xn, y1..ym in point order"""
    xs = tuple(sp.symbols(f'x1:{n + 1}', real=True)) if n else ()
    ys = tuple(sp.symbols(f'y1:{m + 1}', real=True)) if m else ()
    return xs + ys


def _lambdify(symbols, expr):
    """Vectorized evaluator taking points of shape (..., dim)"""
    compiled = sp.lambdify(symbols, expr, 'numpy')

    def evaluate(points):
        points = np.asarray(points, dtype=float)
        coords = [points[..., k] for k in range(points.shape[-1])]
        values = np.asarray(compiled(*coords), dtype=float)
        return np.broadcast_to(values, points.shape[:-1]).copy()

    return evaluate


class CoefficientField:
    """
    Scalar coefficient on the closed box with derivatives up to order 2.
    Symbolic coefficients differentiate exactly; callables use central
    differences with step h_fd and must accept points slightly outside
    the box.
    """

    def __init__(self, symbols, func=None, expr=None, h_fd=DEFAULT_H_FD):
        if func is None and expr is None:
            raise ContractError("coefficient needs an evaluator or an expression")
        self.symbols = tuple(symbols)
        self.dim = len(self.symbols)
        self.h_fd = float(h_fd)
        self.expr = sp.sympify(expr) if expr is not None else None
        if self.expr is not None:
            self._func = _lambdify(self.symbols, self.expr)
            first = [sp.diff(self.expr, s) for s in self.symbols]
            self._grad = [_lambdify(self.symbols, g) for g in first]
            self._hess = [[_lambdify(self.symbols, sp.diff(g, s)) for s in self.symbols]
                          for g in first]
        else:
            self._func = func
            self._grad = None
            self._hess = None

    @classmethod
    def constant(cls, value, symbols):
        return cls(symbols, expr=sp.sympify(value))

    @classmethod
    def coordinate(cls, k, symbols):
        return cls(symbols, expr=symbols[k])

    @property
    def is_symbolic(self):
        return self.expr is not None

    @property
    def is_zero(self):
        return self.expr is not None and bool(self.expr.is_zero)

    def __call__(self, points):
        return self._func(points)

    def gradient(self, points):
        """First derivatives, shape (..., dim)"""
        points = np.asarray(points, dtype=float)
        if self._grad is not None:
            return np.stack([g(points) for g in self._grad], axis=-1)
        return self._fd_gradient(points, self.h_fd)

    def hessian(self, points):
        """Second derivatives, shape (..., dim, dim)"""
        points = np.asarray(points, dtype=float)
        if self._hess is not None:
            rows = [np.stack([h(points) for h in row], axis=-1) for row in self._hess]
            return np.stack(rows, axis=-2)
        return self._fd_hessian(points, self.h_fd)

    def _shifted(self, points, shifts):
        moved = np.array(points, dtype=float, copy=True)
        for k, step in shifts:
            moved[..., k] += step
        return self._func(moved)

    def _fd_gradient(self, points, h):
        columns = [(self._shifted(points, [(k, h)]) - self._shifted(points, [(k, -h)])) / (2.0 * h)
                   for k in range(self.dim)]
        return np.stack(columns, axis=-1)

    def _fd_hessian(self, points, h):
        out = np.empty(points.shape[:-1] + (self.dim, self.dim))
        center = self._func(points)
        for k in range(self.dim):
            out[..., k, k] = (self._shifted(points, [(k, h)]) - 2.0 * center
                              + self._shifted(points, [(k, -h)])) / h ** 2
            for l in range(k + 1, self.dim):
                mixed = (self._shifted(points, [(k, h), (l, h)])
                         - self._shifted(points, [(k, h), (l, -h)])
                         - self._shifted(points, [(k, -h), (l, h)])
                         + self._shifted(points, [(k, -h), (l, -h)])) / (4.0 * h ** 2)
                out[..., k, l] = mixed
                out[..., l, k] = mixed
        return out

    def derivative_mismatch(self, points):
        """Largest gap between the derivative evaluator and a difference quotient"""
        points = np.asarray(points, dtype=float)
        if points.shape[0] == 0:
            return 0.0
        step = 2.0 * self.h_fd if self._grad is None else self.h_fd
        reference = self._fd_gradient(points, step)
        return float(np.max(np.abs(self.gradient(points) - reference)))

    def _coerce(self, other):
        if isinstance(other, CoefficientField):
            if other.symbols != self.symbols:
                raise ContractError("coefficients live on different coordinate sets")
            return other
        return CoefficientField.constant(other, self.symbols)

    def __add__(self, other):
        other = self._coerce(other)
        if self.is_symbolic and other.is_symbolic:
            return CoefficientField(self.symbols, expr=self.expr + other.expr, h_fd=self.h_fd)
        left, right = self, other
        return CoefficientField(self.symbols, func=lambda p: left(p) + right(p), h_fd=self.h_fd)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._coerce(other)
        if self.is_symbolic and other.is_symbolic:
            return CoefficientField(self.symbols, expr=self.expr * other.expr, h_fd=self.h_fd)
        left, right = self, other
        return CoefficientField(self.symbols, func=lambda p: left(p) * right(p), h_fd=self.h_fd)

    __rmul__ = __mul__

    def divided_by_coordinate(self, k):
        """Quotient f/z_k for a coefficient vanishing on {z_k = 0}"""
        if self.is_symbolic:
            numerator, denominator = sp.fraction(sp.cancel(self.expr / self.symbols[k]))
            if not denominator.has(self.symbols[k]):
                return CoefficientField(self.symbols, expr=numerator / denominator, h_fd=self.h_fd)
        field, h = self, self.h_fd

        def quotient(points):
            points = np.asarray(points, dtype=float)
            face = points.copy()
            face[..., k] = 0.0
            xk = points[..., k]
            near = np.abs(xk) < h
            values = (field(points) - field(face)) / np.where(near, 1.0, xk)
            if np.any(near):
                values = np.where(near, field.gradient(points)[..., k], values)
            return values

        return CoefficientField(self.symbols, func=quotient, h_fd=self.h_fd)

    def __repr__(self):
        body = str(self.expr) if self.is_symbolic else 'callable'
        return f"CoefficientField({body})"


def coefficient_from_spec(raw, symbols):
    """Build a coefficient from a number or a {family: ...} description"""
    if isinstance(raw, CoefficientField):
        return raw
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return CoefficientField.constant(raw, symbols)
    if not isinstance(raw, dict):
        raise MalformedOperatorError(f"unsupported coefficient description: {raw!r}")

    family = raw.get('family', 'constant')
    if family == 'constant':
        return CoefficientField.constant(raw.get('value', 0.0), symbols)
    if family == 'affine':
        gradient = raw.get('gradient', [0.0] * len(symbols))
        if len(gradient) != len(symbols):
            raise MalformedOperatorError(
                f"affine gradient has {len(gradient)} entries, expected {len(symbols)}")
        expr = sp.sympify(raw.get('constant', 0.0))
        for g, s in zip(gradient, symbols):
            expr += sp.sympify(g) * s
        return CoefficientField(symbols, expr=expr)
    if family == 'polynomial':
        expr = sp.Integer(0)
        for term in raw.get('terms', []):
            powers = term.get('powers', [])
            if len(powers) != len(symbols):
                raise MalformedOperatorError(
                    f"monomial powers {powers} do not match {len(symbols)} coordinates")
            monomial = sp.Mul(*[s ** int(p) for s, p in zip(symbols, powers)])
            expr += sp.sympify(term.get('coefficient', 1.0)) * monomial
        return CoefficientField(symbols, expr=expr)
    raise MalformedOperatorError(f"unknown coefficient family '{family}'")


@dataclass(frozen=True)
class KimuraOperator:
    """
    Coefficient bundle of a generalized Kimura operator
        L u = sum_i (x_i abar_i u_ii + b_i u_i) + sum_ij x_i x_j a_ij u_ij
              + sum_lk d_lk u_lk + sum_il x_i c_il u_il + sum_l e_l u_l + c0 u
    on the corner box [0, R_i) x (c_l - R, c_l + R)
    """
    n: int
    m: int
    abar: Tuple[CoefficientField, ...]
    a: Tuple[Tuple[CoefficientField, ...], ...]
    b: Tuple[CoefficientField, ...]
    c_mix: Tuple[Tuple[CoefficientField, ...], ...]
    d: Tuple[Tuple[CoefficientField, ...], ...]
    e: Tuple[CoefficientField, ...]
    c0: CoefficientField
    n0: int
    beta0: float
    ellipticity: float
    x_extent: Tuple[float, ...]
    y_center: Tuple[float, ...] = ()
    y_radius: float = 1.0
    name: str = 'custom'

    def __post_init__(self):
        n, m = self.n, self.m
        if n < 0 or m < 0 or n + m == 0:
            raise MalformedOperatorError(f"invalid dimensions n={n}, m={m}")
        if not 0 <= self.n0 <= n:
            raise MalformedOperatorError(f"n0={self.n0} outside [0, {n}]")
        vectors = {'abar': (self.abar, n), 'b': (self.b, n), 'e': (self.e, m)}
        for key, (entries, length) in vectors.items():
            if len(entries) != length:
                raise MalformedOperatorError(f"coefficient {key} has {len(entries)} entries, expected {length}")
        matrices = {'a': (self.a, n, n), 'c_mix': (self.c_mix, n, m), 'd': (self.d, m, m)}
        for key, (rows, count, width) in matrices.items():
            if len(rows) != count or any(len(r) != width for r in rows):
                raise MalformedOperatorError(f"coefficient block {key} must have shape ({count}, {width})")
        if len(self.x_extent) != n or len(self.y_center) != m:
            raise MalformedOperatorError("box extents do not match the dimensions")
        if any(r <= 0 for r in self.x_extent) or (m and self.y_radius <= 0):
            raise ContractError("box side lengths must be positive")
        if self.n0 < n and self.beta0 <= 0:
            raise MalformedOperatorError("beta0 must be positive when transverse faces exist")

    @property
    def symbols(self):
        return coordinate_symbols(self.n, self.m)

    @property
    def dim(self):
        return self.n + self.m

    @property
    def box(self):
        from geometry_measure import CornerBox
        return CornerBox(self.n, self.m, tuple(self.x_extent), tuple(self.y_center), self.y_radius)

    def coefficient_fields(self) -> Iterator[Tuple[str, CoefficientField]]:
        for i, f in enumerate(self.abar):
            yield f'abar[{i + 1}]', f
        for i, row in enumerate(self.a):
            for j, f in enumerate(row):
                yield f'a[{i + 1},{j + 1}]', f
        for i, f in enumerate(self.b):
            yield f'b[{i + 1}]', f
        for i, row in enumerate(self.c_mix):
            for l, f in enumerate(row):
                yield f'c[{i + 1},{l + 1}]', f
        for l, row in enumerate(self.d):
            for k, f in enumerate(row):
                yield f'd[{l + 1},{k + 1}]', f
        for l, f in enumerate(self.e):
            yield f'e[{l + 1}]', f
        yield 'c0', self.c0

    def coefficient_arrays(self, points) -> Dict[str, np.ndarray]:
        """Evaluate every coefficient block at points of shape (N, n+m)"""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        count, n, m = points.shape[0], self.n, self.m

        def block(fields, shape):
            out = np.zeros((count,) + shape)
            for idx in np.ndindex(*shape):
                field = fields
                for k in idx:
                    field = field[k]
                out[(slice(None),) + idx] = field(points)
            return out

        return {
            'abar': block(self.abar, (n,)),
            'a': block(self.a, (n, n)),
            'b': block(self.b, (n,)),
            'c_mix': block(self.c_mix, (n, m)),
            'd': block(self.d, (m, m)),
            'e': block(self.e, (m,)),
            'c0': self.c0(points),
        }

    def describe(self):
        return {
            'name': self.name, 'n': self.n, 'm': self.m, 'n0': self.n0,
            'beta0': self.beta0, 'ellipticity': self.ellipticity,
            'x_extent': list(self.x_extent), 'y_center': list(self.y_center),
            'y_radius': self.y_radius,
        }


@dataclass(frozen=True)
class Jet:
    """Value, gradient and Hessian of a function at a batch of points"""
    value: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray

    def checked(self, dim, count):
        """Return the jet reshaped to (count,), (count, dim), (count, dim, dim)"""
        entries = {'value': (self.value, (count,)),
                   'gradient': (self.gradient, (count, dim)),
                   'hessian': (self.hessian, (count, dim, dim))}
        shaped = {}
        for key, (entry, shape) in entries.items():
            if entry is None:
                raise ContractError(f"jet is missing its {key} entry")
            array = np.asarray(entry, dtype=float)
            if array.size != int(np.prod(shape)):
                raise ContractError(f"jet {key} has {array.size} entries, expected shape {shape}")
            array = array.reshape(shape)
            if not np.all(np.isfinite(array)):
                raise ContractError(f"jet {key} has undefined entries")
            shaped[key] = array
        return Jet(**shaped)

    def __add__(self, other):
        return Jet(np.add(self.value, other.value), np.add(self.gradient, other.gradient),
                   np.add(self.hessian, other.hessian))

    def __mul__(self, scalar):
        return Jet(np.multiply(self.value, scalar), np.multiply(self.gradient, scalar),
                   np.multiply(self.hessian, scalar))

    __rmul__ = __mul__


def jet_from_expr(expr, symbols, points):
    """Exact jet of a sympy expression at points of shape (N, dim)"""
    expr = sp.sympify(expr)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    first = [sp.diff(expr, s) for s in symbols]
    value = _lambdify(symbols, expr)(points)
    gradient = np.stack([_lambdify(symbols, g)(points) for g in first], axis=-1)
    hessian = np.stack([np.stack([_lambdify(symbols, sp.diff(g, s))(points) for s in symbols], axis=-1)
                        for g in first], axis=-2)
    return Jet(value, gradient, hessian)


def apply_pointwise(op: KimuraOperator, jet: Jet, z):
    """Lu at z (one point or a batch) by direct summation over the coefficient blocks"""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    points = np.atleast_2d(z)
    if points.shape[1] != op.dim:
        raise ContractError(f"point has {points.shape[1]} coordinates, operator needs {op.dim}")
    jet = jet.checked(op.dim, points.shape[0])
    coeff = op.coefficient_arrays(points)
    n = op.n
    x = points[:, :n]
    grad_x, grad_y = jet.gradient[:, :n], jet.gradient[:, n:]
    hess = jet.hessian
    hess_xx, hess_xy, hess_yy = hess[:, :n, :n], hess[:, :n, n:], hess[:, n:, n:]

    value = np.sum(x * coeff['abar'] * np.diagonal(hess_xx, axis1=1, axis2=2) + coeff['b'] * grad_x, axis=1)
    value = value + np.einsum('pij,pij->p', x[:, :, None] * x[:, None, :] * coeff['a'], hess_xx)
    value = value + np.einsum('plk,plk->p', coeff['d'], hess_yy)
    value = value + np.einsum('pil,pil->p', x[:, :, None] * coeff['c_mix'], hess_xy)
    value = value + np.sum(coeff['e'] * grad_y, axis=1)
    value = value + coeff['c0'] * jet.value
    return float(value[0]) if single else value


def symbol_matrix(op: KimuraOperator, points):
    """Principal symbol in the rescaled variables sqrt(x_i) xi_i, shape (N, n+m, n+m)"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    coeff = op.coefficient_arrays(points)
    n, m = op.n, op.m
    root = np.sqrt(np.clip(points[:, :n], 0.0, None))
    matrix = np.zeros((points.shape[0], n + m, n + m))
    matrix[:, :n, :n] = root[:, :, None] * root[:, None, :] * coeff['a']
    idx = np.arange(n)
    matrix[:, idx, idx] += coeff['abar']
    matrix[:, :n, n:] = 0.5 * root[:, :, None] * coeff['c_mix']
    matrix[:, n:, :n] = np.swapaxes(matrix[:, :n, n:], 1, 2)
    matrix[:, n:, n:] = coeff['d']
    return 0.5 * (matrix + np.swapaxes(matrix, 1, 2))


def validation_lattice(op: KimuraOperator, resolution):
    """Tensor lattice on the half-open box: x in [0, R), y at cell centres"""
    axes = [r * np.arange(resolution) / resolution for r in op.x_extent]
    axes += [c - op.y_radius + 2.0 * op.y_radius * (np.arange(resolution) + 0.5) / resolution
             for c in op.y_center]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.stack([g.ravel() for g in mesh], axis=-1)


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one structural check"""
    name: str
    passed: bool
    worst_violation: float
    witness: Optional[Tuple[float, ...]] = None
    detail: str = ''

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ValidationReport:
    """Per-check verdicts for one operator on one lattice"""
    operator: str
    lattice_resolution: int
    checks: Tuple[CheckResult, ...]
    min_eigenvalue: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def check(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self):
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self):
        return {
            'operator': self.operator,
            'lattice_resolution': self.lattice_resolution,
            'passed': self.passed,
            'min_eigenvalue': self.min_eigenvalue,
            'checks': [c.to_dict() for c in self.checks],
        }


def _rowmax(values):
    values = np.asarray(values, dtype=float)
    flat = values.reshape(values.shape[0], -1)
    if flat.shape[1] == 0:
        return np.zeros(values.shape[0])
    return flat.max(axis=1)


def _worst(name, violation, points, tol, detail=''):
    idx = int(np.argmax(violation))
    worst = float(violation[idx])
    passed = worst <= tol
    witness = None if passed else tuple(float(v) for v in points[idx])
    return CheckResult(name, passed, worst, witness, detail)


def _probe_directions(dim):
    directions = [np.eye(dim)[k] for k in range(dim)]
    for k in range(dim):
        for l in range(k + 1, dim):
            for sign in (1.0, -1.0):
                v = np.zeros(dim)
                v[k], v[l] = 1.0, sign
                directions.append(v / np.sqrt(2.0))
    return np.array(directions)


def validate(op: KimuraOperator, lattice_resolution=DEFAULT_LATTICE) -> ValidationReport:
    """Certify normal form, symmetry, cleanness and ellipticity on a lattice"""
    if lattice_resolution < 2:
        raise ContractError("lattice resolution must be at least 2")
    points = validation_lattice(op, lattice_resolution)
    coeff = op.coefficient_arrays(points)
    for key, values in coeff.items():
        bad = ~np.isfinite(values)
        if bad.any():
            idx = int(np.argwhere(bad.reshape(bad.shape[0], -1))[0][0])
            raise MalformedOperatorError(
                f"coefficient {key} is not finite at {tuple(points[idx])}")

    n, n0 = op.n, op.n0
    checks = []
    largest = max(float(np.max(np.abs(v))) if v.size else 0.0 for v in coeff.values())
    checks.append(CheckResult('boundedness', True, largest))

    checks.append(_worst('normal_form', _rowmax(np.abs(coeff['abar'] - 1.0)), points, NORMAL_FORM_TOL))

    asym = np.maximum(_rowmax(np.abs(coeff['a'] - np.swapaxes(coeff['a'], 1, 2))),
                      _rowmax(np.abs(coeff['d'] - np.swapaxes(coeff['d'], 1, 2))))
    checks.append(_worst('symmetry', asym, points, SYMMETRY_TOL))

    cleanness = np.zeros(points.shape[0])
    for i in range(n):
        face = points[:, i] == 0.0
        if i < n0:
            gap = np.abs(coeff['b'][:, i])
        else:
            gap = np.clip(op.beta0 - coeff['b'][:, i], 0.0, None)
        cleanness = np.maximum(cleanness, np.where(face, gap, 0.0))
    checks.append(_worst('cleanness', cleanness, points, CLEANNESS_TOL,
                         detail=f'n0={n0}, beta0={op.beta0}'))

    symbol = symbol_matrix(op, points)
    eigen = np.linalg.eigvalsh(symbol)[:, 0]
    probes = _probe_directions(op.dim)
    probe_min = np.einsum('qa,pab,qb->pq', probes, symbol, probes).min(axis=1)
    lowest = np.minimum(eigen, probe_min)
    checks.append(_worst('ellipticity', np.clip(op.ellipticity - lowest, 0.0, None), points,
                         ELLIPTICITY_TOL, detail=f'lambda={op.ellipticity}'))

    interior = np.ones(points.shape[0], dtype=bool)
    for i in range(n):
        interior &= points[:, i] > 4.0 * DEFAULT_H_FD
    inner = points[interior]
    mismatch = 0.0
    for _, field in op.coefficient_fields():
        mismatch = max(mismatch, field.derivative_mismatch(inner))
    tolerance = 1e-5 * (1.0 + largest)
    checks.append(CheckResult('derivatives', mismatch <= tolerance, mismatch))

    report = ValidationReport(op.name, int(lattice_resolution), tuple(checks), float(eigen.min()))
    logger.debug("validated %s on %d points: %s", op.name, points.shape[0],
                 'pass' if report.passed else report.failures())
    return report


def h_transform(op: KimuraOperator, lattice_resolution=17) -> KimuraOperator:
    """
    Conjugate by the tangent weight w^T = prod_{i<=n0} 1/x_i.
    The result satisfies L~(w^T u) = w^T L u, has n0 = 0 and drift 2 on the
    formerly tangent faces.
    """
    if op.n0 == 0:
        return op
    n, n0, symbols = op.n, op.n0, op.symbols
    coords = [CoefficientField.coordinate(i, symbols) for i in range(n)]

    # Certify the bounded quotient b_i / x_i away from the face
    lattice = validation_lattice(op, lattice_resolution)
    quotients = [op.b[i].divided_by_coordinate(i) for i in range(n0)]
    for i, quotient in enumerate(quotients):
        away = lattice[lattice[:, i] >= op.x_extent[i] / lattice_resolution]
        values = quotient(away)
        if not np.all(np.isfinite(values)):
            raise MalformedOperatorError(f"b[{i + 1}]/x_{i + 1} is unbounded")
        logger.debug("b[%d]/x_%d bounded by %.3e", i + 1, i + 1, float(np.max(np.abs(values))))

    b_new = []
    for k in range(n):
        tangent_sum = sum(op.a[i][k] for i in range(n0))
        drift = op.b[k] + 2 * coords[k] * tangent_sum
        if k < n0:
            drift = drift + 2 * op.abar[k]
        b_new.append(drift)
    e_new = [op.e[l] + sum(op.c_mix[i][l] for i in range(n0)) for l in range(op.m)]
    zeroth = op.c0 + sum(quotients)
    for i in range(n0):
        for j in range(n0):
            if i != j:
                zeroth = zeroth + op.a[i][j]

    beta0 = 2.0 if n0 == n else min(2.0, op.beta0)
    conjugated = dataclasses.replace(op, b=tuple(b_new), e=tuple(e_new), c0=zeroth, n0=0,
                                     beta0=beta0, name=f'{op.name}-conjugated')
    report = validate(conjugated, lattice_resolution)
    if not report.passed:
        raise MalformedOperatorError(f"conjugated operator fails validation: {report.failures()}")
    return conjugated


def tangent_weight(op: KimuraOperator, points):
    """w^T at interior points"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return np.prod(1.0 / points[:, :op.n0], axis=1)


def conjugation_residual(op: KimuraOperator, u, probe_points, conjugated=None):
    """max |L~(w^T u) - w^T L u| over interior probes, with exact derivatives"""
    symbols = op.symbols
    u = sp.sympify(u)
    try:
        sp.Poly(u, *symbols)
    except sp.PolynomialError as exc:
        raise ContractError("conjugation test functions must be polynomials") from exc
    tangent = sp.Mul(*symbols[:op.n0])
    quotient, remainder = sp.div(sp.expand(u), tangent, *symbols)
    if sp.expand(remainder) != 0:
        raise ContractError("test function is not divisible by the tangent product")

    points = np.atleast_2d(np.asarray(probe_points, dtype=float))
    if np.any(points[:, :op.n] <= 0.0):
        raise ContractError("probe points must be strictly interior")
    if conjugated is None:
        conjugated = h_transform(op)
    lhs = apply_pointwise(conjugated, jet_from_expr(quotient, symbols, points), points)
    rhs = tangent_weight(op, points) * apply_pointwise(op, jet_from_expr(u, symbols, points), points)
    return float(np.max(np.abs(np.atleast_1d(lhs) - np.atleast_1d(rhs))))


def _matrix_spec(rows, cols, fill=0.0):
    return [[fill for _ in range(cols)] for _ in range(rows)]


BUILTIN_OPERATORS = {
    'model-1d': {
        'n': 1, 'm': 0, 'n0': 1, 'beta0': 1.0, 'ellipticity': 1.0, 'x_extent': [1.0],
        'coefficients': {},
    },
    'model-1d-weighted': {
        'n': 1, 'm': 0, 'n0': 0, 'beta0': 0.5, 'ellipticity': 1.0, 'x_extent': [1.0],
        'coefficients': {'b': [0.5]},
    },
    'model-1d-drift': {
        'n': 1, 'm': 0, 'n0': 1, 'beta0': 1.0, 'ellipticity': 1.0, 'x_extent': [1.0],
        'coefficients': {'b': [{'family': 'affine', 'constant': 0.0, 'gradient': [1.0]}]},
    },
    'kimura-classical': {
        'n': 1, 'm': 0, 'n0': 1, 'beta0': 1.0, 'ellipticity': 0.025, 'x_extent': [1.0],
        'coefficients': {'a': [[-1.0]]},
    },
    'kimura-classical-half': {
        'n': 1, 'm': 0, 'n0': 1, 'beta0': 1.0, 'ellipticity': 0.5, 'x_extent': [0.5],
        'coefficients': {'a': [[-1.0]]},
    },
    'model-s11': {
        'n': 1, 'm': 1, 'n0': 1, 'beta0': 1.0, 'ellipticity': 1.0, 'x_extent': [1.0],
        'y_center': [0.0], 'y_radius': 1.0, 'coefficients': {},
    },
    'model-s20': {
        'n': 2, 'm': 0, 'n0': 2, 'beta0': 1.0, 'ellipticity': 1.0, 'x_extent': [1.0, 1.0],
        'coefficients': {},
    },
    'model-s20-mixed': {
        'n': 2, 'm': 0, 'n0': 1, 'beta0': 0.5, 'ellipticity': 1.0, 'x_extent': [1.0, 1.0],
        'coefficients': {'b': [0.0, 0.5]},
    },
    'mixed-s21': {
        'n': 2, 'm': 1, 'n0': 1, 'beta0': 0.4, 'ellipticity': 0.5, 'x_extent': [1.0, 1.0],
        'y_center': [0.0], 'y_radius': 1.0,
        'coefficients': {
            'a': [[0.0, 0.1], [0.1, 0.0]],
            'b': [{'family': 'affine', 'constant': 0.0, 'gradient': [0.5, 0.0, 0.0]},
                  {'family': 'affine', 'constant': 0.5, 'gradient': [0.0, 0.0, 0.1]}],
            'c_mix': [[0.1], [0.0]],
            'd': [[{'family': 'affine', 'constant': 1.0, 'gradient': [0.1, 0.0, 0.0]}]],
            'e': [0.05],
            'c0': -0.1,
        },
    },
}


def operator_from_spec(spec) -> KimuraOperator:
    """Build an operator from its structured-text description"""
    spec = dict(spec)
    if spec.get('builtin'):
        return builtin_operator(spec['builtin'])
    try:
        n, m = int(spec.get('n', 0)), int(spec.get('m', 0))
        n0 = int(spec['n0'])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedOperatorError(f"operator description lacks dimensions: {exc}") from exc
    symbols = coordinate_symbols(n, m)
    coefficients = dict(spec.get('coefficients') or {})

    def vector(key, length, default):
        raw = coefficients.get(key)
        if raw is None:
            raw = [default] * length
        if len(raw) != length:
            raise MalformedOperatorError(f"coefficient {key} needs {length} entries, got {len(raw)}")
        return tuple(coefficient_from_spec(v, symbols) for v in raw)

    def matrix(key, rows, cols, diagonal=0.0):
        raw = coefficients.get(key)
        if raw is None:
            raw = _matrix_spec(rows, cols)
            for k in range(min(rows, cols)):
                raw[k][k] = diagonal
        if len(raw) != rows or any(len(r) != cols for r in raw):
            raise MalformedOperatorError(f"coefficient {key} needs shape ({rows}, {cols})")
        return tuple(tuple(coefficient_from_spec(v, symbols) for v in r) for r in raw)

    return KimuraOperator(
        n=n, m=m,
        abar=vector('abar', n, 1.0),
        a=matrix('a', n, n),
        b=vector('b', n, 0.0),
        c_mix=matrix('c_mix', n, m),
        d=matrix('d', m, m, diagonal=1.0),
        e=vector('e', m, 0.0),
        c0=coefficient_from_spec(coefficients.get('c0', 0.0), symbols),
        n0=n0,
        beta0=float(spec.get('beta0', 1.0)),
        ellipticity=float(spec.get('ellipticity', 1.0)),
        x_extent=tuple(float(v) for v in spec.get('x_extent', [1.0] * n)),
        y_center=tuple(float(v) for v in spec.get('y_center', [0.0] * m)),
        y_radius=float(spec.get('y_radius', 1.0)),
        name=str(spec.get('name', 'custom')),
    )


def builtin_operator(name) -> KimuraOperator:
    if name not in BUILTIN_OPERATORS:
        raise MalformedOperatorError(
            f"unknown builtin operator '{name}'; choose from {sorted(BUILTIN_OPERATORS)}")
    return operator_from_spec(dict(BUILTIN_OPERATORS[name], name=name))
