"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Tests for geometry_measure: intrinsic distance, cylinders, weighted
quadrature with the epsilon protocol, nodal weights and the envelope
"""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from geometry_measure import (CONVERGENT, DIVERGENT, CornerBox, DomainError, MalformedMeasureError,
                              ParabolicCylinder, QuadratureSpec, WeightedMeasure, a_r_point, coordinate_box_mask,
                              coordinate_box_region, field_integral, integrate, nodal_weights, project_tangent,
                              project_tangent_k, rho, sup_envelope, weight_wPitch, weight_wT)
from operator_core import ContractError, builtin_operator, operator_from_spec
from solver import Field

unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
signed = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)


def ones(points):
    return np.ones(points.shape[0])


class TestIntrinsicDistance:
    def test_square_root_scale_on_x_axes(self):
        assert rho(np.array([0.0]), np.array([0.25])) == pytest.approx(0.5)

    def test_mixed_coordinates(self):
        value = rho(np.array([0.25, 0.0]), np.array([1.0, 0.3]), n=1)
        assert value == pytest.approx(np.sqrt(0.25 + 0.09))

    def test_negative_x_rejected(self):
        with pytest.raises(DomainError):
            rho(np.array([-0.1]), np.array([0.2]))

    def test_batches(self):
        points = np.array([[0.0], [0.25], [1.0]])
        np.testing.assert_allclose(rho(points, np.array([0.0])), [0.0, 0.5, 1.0])

    @given(unit, signed, unit, signed, unit, signed)
    @settings(max_examples=60)
    def test_metric_axioms(self, x1, y1, x2, y2, x3, y3):
        a, b, c = np.array([x1, y1]), np.array([x2, y2]), np.array([x3, y3])
        assert rho(a, a, n=1) == 0.0
        assert rho(a, b, n=1) == pytest.approx(rho(b, a, n=1))
        assert rho(a, c, n=1) <= rho(a, b, n=1) + rho(b, c, n=1) + 1e-12


class TestBoxesAndCylinders:
    def test_corner_box_is_half_open(self, model_s11):
        box = model_s11.box
        inside = box.contains(np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0], [0.5, -0.99]]))
        assert inside.tolist() == [True, False, False, True]
        assert box.radius == 1.0

    def test_corner_box_shape_checked(self):
        with pytest.raises(ContractError):
            CornerBox(1, 1, (1.0,), ())

    def test_coordinate_box_clips_at_face(self):
        points = np.array([[0.0], [0.2], [0.35]])
        assert coordinate_box_mask(points, np.array([0.1]), 0.2, n=1).tolist() == [True, True, False]
        region = coordinate_box_region([0.1], 0.2, 1)
        assert region.bounds[0] == (0.0, pytest.approx(0.3))

    def test_anchor_point_shift(self):
        anchor = a_r_point(np.array([0.0, 0.0]), 0.4, 1)
        np.testing.assert_allclose(anchor, [0.04, 0.2])
        assert rho(np.array([0.0, 0.0]), anchor, n=1) < 0.4

    def test_cylinder_time_windows(self):
        cyl = ParabolicCylinder(1.0, (0.0,), 0.5, 1)
        assert cyl.time_interval == pytest.approx((0.75, 1.0))
        assert cyl.with_variant('plus').time_interval == pytest.approx((1.25, 1.5))
        assert cyl.with_variant('minus').time_interval == pytest.approx((0.25, 0.5))

    def test_cylinder_membership(self):
        cyl = ParabolicCylinder(1.0, (0.0,), 0.5, 1)
        assert cyl.contains_time([0.75, 0.9, 1.0]).tolist() == [False, True, False]
        assert cyl.contains_time([0.75, 1.0], closed=True).tolist() == [True, True]
        mask = cyl.contains([0.8, 0.9], np.array([[0.1], [0.3]]))
        assert mask.shape == (2, 2)
        assert mask.tolist() == [[True, False], [True, False]]

    def test_invalid_cylinder(self):
        with pytest.raises(ContractError):
            ParabolicCylinder(1.0, (0.0,), 0.5, 1, variant='sideways')
        with pytest.raises(ContractError):
            ParabolicCylinder(1.0, (0.0,), 0.0, 1)

    def test_projections(self):
        z = np.array([0.3, 0.4, 0.5])
        np.testing.assert_allclose(project_tangent(z, n0=2), [0.0, 0.0, 0.5])
        np.testing.assert_allclose(project_tangent_k(z, 1, block=[0.9], n0=2), [0.3, 0.9, 0.5])
        with pytest.raises(ContractError):
            project_tangent(z, block=[0.1, 0.2, 0.3], n0=2)


class TestWeightedMeasure:
    def test_tangent_density(self, model_1d):
        assert WeightedMeasure(model_1d).density(np.array([[0.5]]))[0] == pytest.approx(2.0)

    def test_transverse_density(self):
        op = builtin_operator('model-1d-weighted')
        assert WeightedMeasure(op).density(np.array([[0.25]]))[0] == pytest.approx(2.0)

    def test_tilde_and_shift(self, model_1d):
        assert WeightedMeasure.tilde(model_1d).multi_index == (2,)
        shifted = WeightedMeasure(model_1d).shifted((1,))
        assert shifted.density(np.array([[0.5]]))[0] == pytest.approx(1.0)

    def test_multi_index_must_fit(self, model_1d):
        with pytest.raises(ContractError):
            WeightedMeasure(model_1d, (1, 1))

    def test_boundary_weights(self, model_1d):
        assert weight_wT(model_1d, np.array([0.5])) == pytest.approx(2.0)
        assert np.isinf(weight_wT(model_1d, np.array([0.0])))
        weighted = builtin_operator('model-1d-weighted')
        assert weight_wT(weighted, np.array([0.25])) == 1.0
        assert weight_wPitch(weighted, np.array([0.25])) == pytest.approx(2.0)


class TestIntegrate:
    """Singular-weight quadrature and the divergence protocol"""

    def test_constant_diverges_logarithmically(self, model_1d):
        result = integrate(ones, WeightedMeasure(model_1d))
        assert result.status == DIVERGENT
        assert result.divergent
        assert result.log_slope == pytest.approx(1.0, abs=1e-3)
        assert len(result.partials) == len(QuadratureSpec().eps_exponents)

    def test_vanishing_integrand_converges(self, model_1d):
        result = integrate(lambda p: p[:, 0] ** 2, WeightedMeasure(model_1d))
        assert result.status == CONVERGENT
        assert result.value == pytest.approx(0.5, abs=1e-6)

    def test_transverse_weight_is_integrable(self):
        op = builtin_operator('model-1d-weighted')
        result = integrate(lambda p: p[:, 0], WeightedMeasure(op))
        assert result.status == CONVERGENT
        assert result.value == pytest.approx(2.0 / 3.0, rel=1e-8)

    def test_region_away_from_face(self, model_1d):
        region = coordinate_box_region([0.5], 0.25, 1)
        result = integrate(lambda p: p[:, 0] ** 2, WeightedMeasure(model_1d), region=region)
        assert result.status == CONVERGENT
        assert result.value == pytest.approx(0.25, rel=1e-10)

    def test_product_box(self, model_s11):
        result = integrate(lambda p: p[:, 0] * p[:, 1] ** 2, WeightedMeasure(model_s11))
        assert result.value == pytest.approx(2.0 / 3.0, rel=1e-6)

    def test_non_integrable_transverse_exponent(self):
        op = operator_from_spec({'n': 1, 'm': 0, 'n0': 0, 'beta0': 0.1, 'coefficients': {'b': [0.0]}})
        with pytest.raises(MalformedMeasureError):
            integrate(ones, WeightedMeasure(op))

    def test_result_carries_quadrature_digest(self, model_1d):
        spec = QuadratureSpec(nodes_per_cell=8)
        result = integrate(lambda p: p[:, 0] ** 2, WeightedMeasure(model_1d), quadrature=spec)
        assert result.spec_digest == spec.digest()
        assert result.to_dict()['status'] == CONVERGENT

    def test_field_input_uses_nodal_weights(self, model_1d, grid_1d):
        field = Field.from_function(grid_1d, lambda p: p[:, 0] ** 2)
        result = integrate(field, WeightedMeasure(model_1d))
        assert result.value == pytest.approx(0.5, abs=1e-3)


class TestNodalWeights:
    def test_quadratic_data_to_interpolation_accuracy(self, model_1d, grid_1d):
        result = field_integral(grid_1d.points[:, 0] * (1.0 - grid_1d.points[:, 0]), grid_1d,
                                WeightedMeasure(model_1d))
        # int (1 - x) dx, up to the interpolation error of the quadratic
        assert result.value == pytest.approx(0.5, abs=1e-3)

    def test_face_weight_is_infinite(self, model_1d, grid_1d):
        weights = nodal_weights(grid_1d, WeightedMeasure(model_1d))
        assert np.isinf(weights[0])
        assert np.all(np.isfinite(weights[1:]))

    def test_zero_face_values_raise_no_warning(self, model_1d, grid_1d):
        values = grid_1d.points[:, 0] * (1.0 - grid_1d.points[:, 0])
        with np.errstate(invalid='warn'), warnings.catch_warnings():
            warnings.simplefilter('error', RuntimeWarning)
            result = field_integral(values, grid_1d, WeightedMeasure(model_1d))
        assert result.status == CONVERGENT
        assert np.isfinite(result.value)

    def test_nonzero_face_values_diverge(self, model_1d, grid_1d):
        result = field_integral(np.ones(grid_1d.size), grid_1d, WeightedMeasure(model_1d))
        assert result.status == DIVERGENT

    def test_mask_restricts(self, model_1d, grid_1d):
        values = grid_1d.points[:, 0] ** 2
        full = field_integral(values, grid_1d, WeightedMeasure(model_1d))
        half = field_integral(values, grid_1d, WeightedMeasure(model_1d), mask=grid_1d.points[:, 0] <= 0.5)
        assert 0.0 < half.value < full.value


class TestSupEnvelope:
    def test_closed_form_on_model_operator(self, model_1d):
        result = sup_envelope(model_1d, np.array([0.1]), 0.5, p=4.0)
        q = 4.0 / 3.0
        expected = (1.5 * (0.5 ** (2.0 / 3.0) - 0.1 ** (2.0 / 3.0))) ** (1.0 / q)
        assert result.q == pytest.approx(q)
        assert not result.divergent
        assert result.value == pytest.approx(expected, rel=1e-8)

    def test_empty_rectangle(self, model_1d):
        assert sup_envelope(model_1d, np.array([0.6]), 0.5).value == 0.0

    def test_transverse_shift_diverges(self):
        op = builtin_operator('model-1d-weighted')
        result = sup_envelope(op, np.array([0.0]), 0.5, p=2.2, transverse=1)
        assert result.divergent
        assert result.divergent_axis == 1

    def test_contract_checks(self, model_1d):
        with pytest.raises(ContractError):
            sup_envelope(model_1d, np.array([0.1]), 0.5, p=2.0)
        with pytest.raises(ContractError):
            sup_envelope(model_1d, np.array([0.1]), 1.0)
        with pytest.raises(ContractError):
            sup_envelope(model_1d, np.array([0.1]), 0.5, transverse=1)


class TestQuadratureSpec:
    def test_digest_tracks_fields(self):
        assert QuadratureSpec().digest() == QuadratureSpec().digest()
        assert QuadratureSpec(layers=20).digest() != QuadratureSpec().digest()

    def test_unknown_field_rejected(self):
        with pytest.raises(ValidationError):
            QuadratureSpec(order=3)

    def test_needs_three_epsilons(self):
        with pytest.raises(ValidationError):
            QuadratureSpec(eps_exponents=(3, 4))
