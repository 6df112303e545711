"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Estimates Harness
Falsifiable experiments for the boundary estimates: empirical constants,
refinement series and PASS / FAIL / VACUOUS_PASS / INCONCLUSIVE verdicts
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid

from geometry_measure import (ParabolicCylinder, WeightedMeasure, coordinate_box_mask, field_integral,
                              project_tangent, rho, sup_envelope, weight_wT)
from operator_core import ContractError
from solver import Field, dirichlet_mask, tangent_face_mask, weighted_l2

logger = logging.getLogger(__name__)

PASS = 'PASS'
FAIL = 'FAIL'
VACUOUS_PASS = 'VACUOUS_PASS'
INCONCLUSIVE = 'INCONCLUSIVE'
VERDICTS = (PASS, FAIL, VACUOUS_PASS, INCONCLUSIVE)

TIME_TOL = 1e-9
ALPHA_SCAN = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))
HOLDER_MIN_SHELLS = 4
HOLDER_MAX_SHELLS = 8
HOLDER_MIN_PAIRS = 10
HOLDER_ACCEPT = 0.75


@dataclass
class EstimateReport:
    """One experiment outcome; verdict PASS iff the tolerance predicate holds on the series"""
    tag: str
    constants: Dict[str, Optional[float]]
    series: List[Dict] = field(default_factory=list)
    tolerance: Optional[float] = None
    verdict: str = INCONCLUSIVE
    config_hash: str = ''
    flags: List[str] = field(default_factory=list)
    grids: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ContractError(f"unknown verdict '{self.verdict}'")

    @property
    def failed(self):
        return self.verdict == FAIL

    def to_dict(self):
        return {'tag': self.tag, 'verdict': self.verdict, 'constants': dict(self.constants),
                'tolerance': self.tolerance, 'series': list(self.series), 'flags': list(self.flags),
                'grids': list(self.grids), 'config_hash': self.config_hash}


def stability_verdict(values, tolerance):
    """
    Refinement predicate over a coarse-to-fine series: the last two levels
    agree within the relative tolerance; a monotone blow-up over three or
    more levels fails regardless
    """
    values = [float(v) for v in values if v is not None]
    if len(values) < 2:
        return INCONCLUSIVE, None
    if not all(np.isfinite(values)):
        return FAIL, float('inf')
    magnitudes = np.abs(values)
    if len(values) >= 3 and np.all(magnitudes[1:] >= magnitudes[:-1] * (1.0 + tolerance)):
        return FAIL, float(magnitudes[-1] / max(magnitudes[-2], 1e-300) - 1.0)
    scale = max(magnitudes[-1], magnitudes[-2])
    change = 0.0 if scale == 0.0 else float(abs(values[-1] - values[-2]) / scale)
    return (PASS if change <= tolerance else FAIL), change


def refinement_report(tag, values, tolerance, rows=None, flags=None, grids=None, constants=None):
    """EstimateReport whose verdict is the stability of values across refinements"""
    verdict, change = stability_verdict(values, tolerance)
    finest = next((v for v in reversed(list(values)) if v is not None), None)
    merged = {'value': finest, 'relative_change': change}
    merged.update(constants or {})
    return EstimateReport(tag, merged, list(rows or []), tolerance, verdict, flags=list(flags or []),
                          grids=list(grids or []))


def _snapshot_indices(traj, lo, hi):
    times = np.asarray(traj.times)
    return np.nonzero((times >= lo - TIME_TOL) & (times <= hi + TIME_TOL))[0]


def _snapshot_at(traj, t):
    """Nearest saved snapshot; t must lie inside the saved time range"""
    times = np.asarray(traj.times)
    spacing = float(np.max(np.diff(times))) if times.size > 1 else 0.0
    if t < times[0] - TIME_TOL or t > times[-1] + 0.5 * spacing + TIME_TOL:
        raise ContractError(f"time {t:.6g} lies outside the trajectory [{times[0]:.6g}, {times[-1]:.6g}]")
    return traj.nearest(t)


def _free_nodes(op, grid):
    return ~dirichlet_mask(op, grid)


@dataclass
class VanishingFit:
    """Least-squares slope of log |u| against log x along a line"""
    slope: Optional[float]
    intercept: Optional[float]
    samples: int
    degenerate: bool = False
    time: Optional[float] = None

    def to_dict(self):
        return dict(self.__dict__)


def vanishing_exponent(traj, op, i, t_probe, fit_window=(1e-3, 1e-2), direction='axis', anchor=None, samples=12):
    """
    Slope of log |u| versus log x_i (1-based tangent index) with the other
    coordinates fixed at anchor; direction='diagonal' moves every tangent
    coordinate together
    """
    if not 1 <= i <= op.n0:
        raise ContractError(f"index {i} is not a tangent direction (1..{op.n0})")
    lo, hi = fit_window
    if not 0.0 < lo < hi:
        raise ContractError("fit window must satisfy 0 < lo < hi")
    snapshot = _snapshot_at(traj, t_probe)
    if anchor is None:
        anchor = [0.5 * r for r in op.x_extent] + list(op.y_center)
    base = np.asarray(anchor, dtype=float)
    s = np.geomspace(lo, hi, samples)
    points = np.repeat(base[None, :], samples, axis=0)
    moving = range(op.n0) if direction == 'diagonal' else [i - 1]
    for k in moving:
        points[:, k] = s
    values = np.abs(snapshot.at(points))
    scale = float(np.max(np.abs(snapshot.values))) if snapshot.values.size else 0.0
    if np.any(values <= 1e-14 * max(scale, 1e-300)) or scale == 0.0:
        return VanishingFit(None, None, samples, True, snapshot.time)
    slope, intercept = np.polyfit(np.log(s), np.log(values), 1)
    logger.debug("vanishing slope along x_%d (%s) at t=%.3g: %.4f", i, direction, snapshot.time, slope)
    return VanishingFit(float(slope), float(intercept), samples, False, snapshot.time)


def _derivative_weight(op, points, k):
    """prod_{i<=n0, i != k} x_i for tangent k, prod_{i<=n0} x_i otherwise"""
    tangent = [i for i in range(op.n0) if i != k - 1]
    return np.prod(points[:, tangent], axis=1) if tangent else np.ones(points.shape[0])


def _inner_mask(op, points, inner):
    mask = np.ones(points.shape[0], dtype=bool)
    for i, r in enumerate(op.x_extent):
        mask &= points[:, i] <= inner * r
    for l, c in enumerate(op.y_center):
        mask &= np.abs(points[:, op.n + l] - c) <= inner * op.y_radius
    return mask


def scaled_derivative_sup(traj, op, k, t_probe, inner=0.5):
    """sup over interior nodes of the inner sub-box of |D^{e_k} u| / weight"""
    if not 1 <= k <= op.dim:
        raise ContractError(f"derivative index {k} outside 1..{op.dim}")
    snapshot = _snapshot_at(traj, t_probe)
    grid = traj.grid
    points = grid.points
    orders = tuple(1 if j == k - 1 else 0 for j in range(grid.dim))
    derivative = snapshot.derivative(orders).flat
    weight = _derivative_weight(op, points, k)
    usable = _inner_mask(op, points, inner) & (weight > 0.0) & _free_nodes(op, grid)
    if not np.any(usable):
        return None
    return float(np.max(np.abs(derivative[usable]) / weight[usable]))


def derivative_bound_check(trajectories, op, k, t_probe, tolerance=0.2, inner=0.5):
    """Scaled derivative suprema on a coarse-to-fine series of trajectories"""
    values, rows, grids = [], [], []
    for traj in trajectories:
        value = scaled_derivative_sup(traj, op, k, t_probe, inner)
        values.append(value)
        rows.append({'nodes': 'x'.join(map(str, traj.grid.shape)), 'scaled_sup': value})
        grids.append(traj.grid.signature())
    flags = [] if all(v is not None for v in values) else ['no interior nodes in the inner sub-box']
    return refinement_report('derivative_bound', values, tolerance, rows, flags, grids, {'index': k})


@dataclass
class CylinderRatio:
    """Cylinder extremum of w^T u over its anchor value"""
    value: Optional[float]
    extremum: float
    anchor_value: float
    nodes: int
    snapshots: int
    verdict: str = PASS
    flags: List[str] = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def _cylinder_values(traj, op, cyl, closed=True):
    """w^T u on free nodes of Q_r over the snapshots inside its time interval"""
    grid = traj.grid
    lo, hi = cyl.time_interval
    indices = _snapshot_indices(traj, lo, hi) if closed else np.nonzero(cyl.contains_time(traj.times))[0]
    points = grid.points
    nodes = _free_nodes(op, grid) & cyl.contains_points(points)
    if op.n0:
        nodes &= np.all(points[:, :op.n0] > 0.0, axis=1)
    weight = weight_wT(op, points[nodes]) if op.n0 else np.ones(int(nodes.sum()))
    values = [traj.snapshots[j].ravel()[nodes] * weight for j in indices]
    return (np.concatenate(values) if values else np.empty(0)), int(nodes.sum()), len(indices)


def _anchor_value(traj, op, cyl, t):
    anchor = cyl.anchor
    snapshot = _snapshot_at(traj, t)
    weight = weight_wT(op, anchor[None, :])[0] if op.n0 else 1.0
    return float(weight * snapshot.at(anchor[None, :])[0])


def _check_cylinder(traj, cyl):
    if cyl.t <= 4.0 * cyl.r ** 2:
        raise ContractError("cylinder needs t > 4 r^2")
    if cyl.t + cyl.r ** 2 > traj.times[-1] + TIME_TOL:
        raise ContractError("the anchor time t + r^2 lies beyond the trajectory")


def _ratio(extremum, anchor, nodes, snapshots, which):
    flags = []
    if nodes == 0 or snapshots == 0:
        return CylinderRatio(None, extremum, anchor, nodes, snapshots, INCONCLUSIVE,
                             ['no grid nodes or snapshots inside the cylinder'])
    if extremum == 0.0 and anchor == 0.0:
        return CylinderRatio(0.0, extremum, anchor, nodes, snapshots, VACUOUS_PASS, ['0/0 ratio of a zero solution'])
    if anchor <= 0.0:
        flags.append(f'{which}: anchor value {anchor:.3e} vanishes while the solution does not '
                     '(strong maximum principle violated)')
        return CylinderRatio(float('inf'), extremum, anchor, nodes, snapshots, FAIL, flags)
    return CylinderRatio(float(extremum / anchor), extremum, anchor, nodes, snapshots, PASS, flags)


def _nonnegative_flags(traj):
    low = min(float(np.min(s)) for s in traj.snapshots)
    high = max(float(np.max(np.abs(s))) for s in traj.snapshots)
    return [f'trajectory takes negative values (min {low:.3e})'] if low < -1e-9 * max(high, 1.0) else []


def carleson_constant(traj, op, cyl: ParabolicCylinder):
    """[sup_{Q_r} w^T u] / [w^T(A_r) u(t + r^2, A_r)]"""
    _check_cylinder(traj, cyl)
    values, nodes, snapshots = _cylinder_values(traj, op, cyl)
    extremum = float(np.max(values)) if values.size else 0.0
    result = _ratio(extremum, _anchor_value(traj, op, cyl, cyl.t + cyl.r ** 2), nodes, snapshots, 'carleson')
    result.flags.extend(_nonnegative_flags(traj))
    return result


def hopf_oleinik_constant(traj, op, cyl: ParabolicCylinder):
    """[inf_{Q_r} w^T u] / [w^T(A_r) u(t - 2r^2, A_r)]; bounded away from 0 when the estimate holds"""
    _check_cylinder(traj, cyl)
    values, nodes, snapshots = _cylinder_values(traj, op, cyl)
    extremum = float(np.min(values)) if values.size else 0.0
    anchor = _anchor_value(traj, op, cyl, cyl.t - 2.0 * cyl.r ** 2)
    result = _ratio(extremum, anchor, nodes, snapshots, 'hopf_oleinik')
    if result.verdict == PASS and extremum <= 0.0:
        result.verdict = FAIL
        result.flags.append('w^T u reaches zero inside the cylinder')
    result.flags.extend(_nonnegative_flags(traj))
    return result


def anchor_consistency(carleson: CylinderRatio, hopf: CylinderRatio):
    """sup_{Q_r} w^T u >= inf_{Q_r} w^T u, and both anchors positive when the solution is"""
    flags = []
    if carleson.nodes and hopf.nodes and carleson.extremum < hopf.extremum:
        flags.append('cylinder supremum is below the cylinder infimum')
    if hopf.extremum > 0.0:
        for name, ratio in (('carleson', carleson), ('hopf_oleinik', hopf)):
            if ratio.anchor_value <= 0.0:
                flags.append(f'{name} anchor is not positive for a positive solution')
    return not flags, flags


@dataclass
class QuotientBounds:
    """Ratio v = u1/u2 over Q_r against its anchored two-time counterparts"""
    sup_form: float
    inf_form: float
    global_ratio: float
    sup_ratio: float
    inf_ratio: float
    flags: List[str] = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def _quotient_samples(traj1, traj2, op, cyl):
    grid = traj2.grid
    if traj1.grid != grid or tuple(traj1.times) != tuple(traj2.times):
        raise ContractError("quotients need trajectories on the same grid and times")
    lo, hi = cyl.time_interval
    indices = _snapshot_indices(traj2, lo, hi)
    points = grid.points
    nodes = _free_nodes(op, grid) & cyl.contains_points(points)
    if op.n0:
        nodes &= np.all(points[:, :op.n0] > 0.0, axis=1)
    times, coords, ratios = [], [], []
    for j in indices:
        u1 = traj1.snapshots[j].ravel()[nodes]
        u2 = traj2.snapshots[j].ravel()[nodes]
        if np.any(u2 <= 0.0):
            raise ContractError("the denominator solution must be positive inside the cylinder")
        times.append(np.full(u2.size, traj2.times[j]))
        coords.append(points[nodes])
        ratios.append(u1 / u2)
    if not ratios:
        return np.empty(0), np.empty((0, grid.dim)), np.empty(0)
    return np.concatenate(times), np.concatenate(coords), np.concatenate(ratios)


def quotient_bounds(traj1, traj2, op, cyl: ParabolicCylinder):
    """
    sup_form = sup(u1/u2) / [u1(t+r^2, A_r) / u2(t-2r^2, A_r)],
    inf_form = inf(u1/u2) / [u1(t-2r^2, A_r) / u2(t+r^2, A_r)],
    global_ratio = sup(u1/u2) / inf(u1/u2)
    """
    _check_cylinder(traj2, cyl)
    _, _, ratios = _quotient_samples(traj1, traj2, op, cyl)
    if ratios.size == 0:
        raise ContractError("no grid nodes inside the cylinder")
    late, early = cyl.t + cyl.r ** 2, cyl.t - 2.0 * cyl.r ** 2
    a1_late, a1_early = _anchor_value(traj1, op, cyl, late), _anchor_value(traj1, op, cyl, early)
    a2_late, a2_early = _anchor_value(traj2, op, cyl, late), _anchor_value(traj2, op, cyl, early)
    if a2_late <= 0.0 or a2_early <= 0.0:
        raise ContractError("the denominator solution must be positive at the anchor")
    high, low = float(np.max(ratios)), float(np.min(ratios))
    sup_form = high / (a1_late / a2_early) if a1_late > 0.0 else float('inf')
    inf_form = low / (a1_early / a2_late) if a1_early > 0.0 else float('inf')
    global_ratio = high / low if low > 0.0 else float('inf')
    flags = []
    if sup_form < 1.0:
        flags.append(f'sup-form constant {sup_form:.4g} is below 1')
    if inf_form > sup_form:
        flags.append('inf-form constant exceeds the sup-form constant')
    return QuotientBounds(sup_form, inf_form, global_ratio, high, low, flags)


@dataclass
class HolderEstimate:
    """Largest scanned alpha whose dyadic oscillation decay is observed"""
    alpha: Optional[float]
    decay_rate: Optional[float]
    shells: List[float]
    oscillations: List[float]
    samples: int
    flags: List[str] = field(default_factory=list)

    @property
    def verdict(self):
        if self.alpha is None:
            return INCONCLUSIVE if any('insufficient' in f for f in self.flags) else FAIL
        return PASS

    def to_dict(self):
        return dict(self.__dict__, verdict=self.verdict)


def holder_alpha_from_samples(times, points, values, n, seed=0, max_samples=1500, scan=ALPHA_SCAN):
    """
    Oscillation of the samples over dyadic shells of the parabolic distance
    sqrt|s - s'| + rho(z, z'); alpha passes when the fitted decay rate is
    at least HOLDER_ACCEPT * alpha
    """
    times = np.asarray(times, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float)
    count = values.size
    if count > max_samples:
        keep = np.sort(np.random.default_rng(seed).choice(count, max_samples, replace=False))
        times, points, values = times[keep], points[keep], values[keep]
        count = max_samples
    if count < 2:
        return HolderEstimate(None, None, [], [], count, ['insufficient resolution: fewer than two samples'])
    first, second = np.triu_indices(count, k=1)
    distance = np.sqrt(np.abs(times[first] - times[second])) + rho(points[first], points[second], n)
    jumps = np.abs(values[first] - values[second])
    if np.all(jumps == 0.0):
        return HolderEstimate(float(max(scan)), None, [], [], count)

    top = float(np.max(distance))
    shells, oscillations = [], []
    for k in range(HOLDER_MAX_SHELLS):
        upper = top * 2.0 ** (-k)
        inside = (distance > 0.5 * upper) & (distance <= upper)
        if inside.sum() < HOLDER_MIN_PAIRS:
            continue
        osc = float(np.max(jumps[inside]))
        if osc > 0.0:
            shells.append(upper)
            oscillations.append(osc)
    if len(shells) < HOLDER_MIN_SHELLS:
        return HolderEstimate(None, None, shells, oscillations, count,
                              [f'insufficient resolution: {len(shells)} shells, need {HOLDER_MIN_SHELLS}'])
    rate = float(np.polyfit(np.log2(shells), np.log2(oscillations), 1)[0])
    passing = [a for a in scan if rate >= HOLDER_ACCEPT * a]
    alpha = float(max(passing)) if passing else None
    flags = [] if passing else [f'oscillation decay rate {rate:.3f} supports no scanned alpha']
    logger.debug("Holder scan: decay rate %.3f over %d shells, alpha=%s", rate, len(shells), alpha)
    return HolderEstimate(alpha, rate, shells, oscillations, count, flags)


def holder_quotient_alpha(traj1, traj2, op, cyl: ParabolicCylinder, seed=0, max_samples=1500):
    times, points, ratios = _quotient_samples(traj1, traj2, op, cyl)
    return holder_alpha_from_samples(times, points, ratios, op.n, seed, max_samples)


def elliptic_harnack(traj, op, t, r, inner=0.5):
    """sup / inf of w^T u over the slab [t - r^2, t] x (inner part of the box)"""
    final = traj.times[-1]
    if not 4.0 * r ** 2 < t < final - 4.0 * r ** 2 + TIME_TOL:
        raise ContractError(f"need 4 r^2 < t < T - 4 r^2; got t={t}, r={r}, T={final}")
    grid = traj.grid
    points = grid.points
    nodes = _free_nodes(op, grid) & _inner_mask(op, points, inner)
    if op.n0:
        nodes &= np.all(points[:, :op.n0] > 0.0, axis=1)
    weight = weight_wT(op, points[nodes]) if op.n0 else np.ones(int(nodes.sum()))
    indices = _snapshot_indices(traj, t - r ** 2, t)
    if not nodes.any() or indices.size == 0:
        return CylinderRatio(None, 0.0, 0.0, int(nodes.sum()), int(indices.size), INCONCLUSIVE,
                             ['no grid nodes or snapshots inside the slab'])
    values = np.concatenate([traj.snapshots[j].ravel()[nodes] * weight for j in indices])
    high, low = float(np.max(values)), float(np.min(values))
    if high == 0.0 and low == 0.0:
        return CylinderRatio(0.0, 0.0, 0.0, int(nodes.sum()), int(indices.size), VACUOUS_PASS,
                             ['0/0 ratio of a zero solution'])
    if low <= 0.0:
        return CylinderRatio(float('inf'), high, low, int(nodes.sum()), int(indices.size), FAIL,
                             ['w^T u is not positive on the slab'])
    return CylinderRatio(high / low, high, low, int(nodes.sum()), int(indices.size))


@dataclass
class SobolevCheck:
    """sup_s |D^a_x D^b_y u(s)|^2 on B_r against |f|^2 + |u|^2_{L2 L2}"""
    lhs: float
    rhs: float
    constant: Optional[float]
    divergent: bool
    multi_index: Tuple[int, ...]
    y_index: Tuple[int, ...]

    def to_dict(self):
        return dict(self.__dict__)


def sobolev_sup_check(traj, op, a_index, b_index=None, t=0.0, r=0.5):
    """Weighted-Sobolev sup over [t, T] measured with d mu_a on the corner box B_r"""
    a_index = tuple(int(v) for v in a_index)
    b_index = tuple(int(v) for v in (b_index or (0,) * op.m))
    if len(a_index) != op.n or len(b_index) != op.m or min(a_index + b_index, default=0) < 0:
        raise ContractError("multi-indices must be nonnegative and match (n, m)")
    if sum(a_index) + sum(b_index) > 2:
        raise ContractError("derivative order above 2 is not supported")
    grid = traj.grid
    measure = WeightedMeasure(op)
    shifted = WeightedMeasure(op, a_index)
    corner = np.array([0.0] * op.n + list(op.y_center))
    mask = coordinate_box_mask(grid.points, corner, r, op.n)
    orders = a_index + b_index

    divergent, lhs = False, 0.0
    for j in _snapshot_indices(traj, t, traj.times[-1]):
        snapshot = Field(grid, traj.snapshots[j])
        derivative = snapshot.derivative(orders) if any(orders) else snapshot
        result = field_integral(derivative.values ** 2, grid, shifted, mask=mask)
        if result.divergent:
            divergent = True
            break
        lhs = max(lhs, result.value)

    l2_squares = [weighted_l2(s, grid, measure) ** 2 for s in traj.snapshots]
    time_l2 = float(trapezoid(l2_squares, traj.times)) if len(traj.times) > 1 else 0.0
    rhs = l2_squares[0] + time_l2
    if divergent:
        logger.warning("weighted Sobolev norm diverges for multi-index %s", a_index)
        return SobolevCheck(float('inf'), rhs, None, True, a_index, b_index)
    constant = lhs / rhs if rhs > 0.0 else (0.0 if lhs == 0.0 else float('inf'))
    return SobolevCheck(lhs, rhs, constant, False, a_index, b_index)


def envelope_scan(traj, op, t, r0, p_values=(3.0, 4.0, 6.0, 8.0), transverse=None, quadrature=None):
    """
    Per p, the smallest C with |u(s, z)| <= C W_{r0}(pi(z)) prod_{i<=n0} x_i (|f| + |u|_{L2 L2})
    over s in [t, T] and nodes with every coordinate below r0
    """
    grid = traj.grid
    measure = WeightedMeasure(op)
    points = grid.points
    nodes = _free_nodes(op, grid) & np.all(points < r0, axis=1)
    if op.n0:
        nodes &= np.all(points[:, :op.n0] > 0.0, axis=1)
    l2 = [weighted_l2(s, grid, measure) for s in traj.snapshots]
    norm = l2[0] + (float(np.sqrt(trapezoid(np.square(l2), traj.times))) if len(traj.times) > 1 else 0.0)
    indices = _snapshot_indices(traj, t, traj.times[-1])
    if not nodes.any() or indices.size == 0:
        return [{'p': float(p), 'constant': None, 'flag': 'no nodes below r0'} for p in p_values]
    peak = np.max(np.abs(np.stack([traj.snapshots[j].ravel()[nodes] for j in indices])), axis=0)
    selected = points[nodes]
    tangent = np.prod(selected[:, :op.n0], axis=1) if op.n0 else np.ones(selected.shape[0])

    rows = []
    for p in p_values:
        cache, constant, divergent_axes = {}, 0.0, set()
        for point, value, product in zip(selected, peak, tangent):
            projected = project_tangent(point, n0=op.n0)
            key = tuple(np.round(projected, 14))
            if key not in cache:
                cache[key] = sup_envelope(op, projected, r0, p, transverse, quadrature)
            envelope = cache[key]
            if envelope.divergent:
                divergent_axes.add(envelope.divergent_axis)
                continue
            bound = envelope.value * product * norm
            if value > 0.0:
                constant = max(constant, float('inf') if bound <= 0.0 else value / bound)
        rows.append({'p': float(p), 'q': float(p / (p - 1.0)), 'constant': constant,
                     'divergent_axes': sorted(divergent_axes), 'envelopes': len(cache)})
        logger.debug("envelope scan p=%.2f: C=%.4g over %d projections", p, constant, len(cache))
    return rows


@dataclass
class MaximumPrincipleReport:
    """Minimum nodal value and largest tangent-face magnitude of one trajectory"""
    min_value: float
    tangent_max: float
    tolerance: float
    verdict: str

    def to_dict(self):
        return dict(self.__dict__)


def maximum_principle_check(traj, op, tolerance=1e-9):
    """Nonnegative data stay nonnegative and the tangent faces stay at zero"""
    stacked = traj.stacked()
    scale = max(1.0, float(np.max(np.abs(stacked)))) if stacked.size else 1.0
    face = tangent_face_mask(op, traj.grid)
    min_value = float(np.min(stacked))
    tangent_max = float(np.max(np.abs(stacked[:, face]))) if face.any() else 0.0
    data_nonnegative = float(np.min(stacked[0])) >= -tolerance * scale
    ok = tangent_max <= tolerance * scale and (not data_nonnegative or min_value >= -tolerance * scale)
    return MaximumPrincipleReport(min_value, tangent_max, tolerance, PASS if ok else FAIL)
