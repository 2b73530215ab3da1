"""Transform G: closed forms for constant coefficients and quadrature oracles otherwise."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from zvonkin.errors import ChartBuildError, ChartExitError, InputError
from zvonkin.io import dumps
from zvonkin.model import constant_field
from zvonkin.transform import (
    Tolerances,
    TransformChart,
    apply_G,
    apply_H,
    build_chart,
    ck,
    default_delta,
    g1,
    gk,
    grad_G,
    hess_G,
    inner_exponent,
    transformed_coefficients,
)

E = math.e


# ----------------------------------------------------------------------
# closed forms
# ----------------------------------------------------------------------
def test_zero_drift_gives_zero_exponent_and_identity(zero_chart):
    x1 = np.linspace(-0.9, 0.9, 7)
    np.testing.assert_array_equal(inner_exponent(zero_chart, x1, [0.1]), 0.0)
    pts = np.column_stack([x1, np.full(7, 0.2)])
    np.testing.assert_allclose(apply_G(zero_chart, pts), pts, atol=1e-15)
    np.testing.assert_allclose(hess_G(zero_chart, 1, pts), 0.0, atol=1e-15)
    np.testing.assert_allclose(ck(zero_chart, 2, x1, [0.1]), 0.0)
    np.testing.assert_allclose(gk(zero_chart, 2, pts), 0.0)
    mu, sig = transformed_coefficients(zero_chart, pts)
    np.testing.assert_allclose(mu, 0.0, atol=1e-15)
    np.testing.assert_allclose(sig, np.broadcast_to(np.eye(2), sig.shape), atol=1e-15)


def test_piecewise_exponent(pc_chart):
    np.testing.assert_allclose(inner_exponent(pc_chart, [1.0, -1.0]), [-1.0, -1.0], atol=1e-12)


def test_constant_drift_exponent():
    f = constant_field([1.0], [1.0], [[math.sqrt(2.0)]])
    chart = build_chart(f, [0.0], 3.5, shrink=False)
    assert inner_exponent(chart, [3.0])[0] == pytest.approx(3.0, abs=1e-10)


@pytest.mark.parametrize("x", [1.0, -1.0, 0.37, -0.81, 0.0])
def test_piecewise_g1_closed_form(pc_chart, x):
    expected = math.copysign(math.expm1(abs(x)), x)
    assert g1(pc_chart, [[x]])[0] == pytest.approx(expected, abs=1e-9)


def test_piecewise_derivatives(pc_chart):
    assert grad_G(pc_chart, [[1.0]])[0, 0, 0] == pytest.approx(E, abs=1e-8)
    assert hess_G(pc_chart, 1, [[1.0]])[0, 0, 0] == pytest.approx(E, abs=1e-6)
    assert grad_G(pc_chart, [[0.0]])[0, 0, 0] == pytest.approx(1.0, abs=1e-12)


def test_piecewise_inverse(pc_chart):
    assert apply_H(pc_chart, [[E - 1.0]])[0, 0] == pytest.approx(1.0, abs=1e-10)
    assert apply_H(pc_chart, [[0.0]])[0, 0] == 0.0


def test_piecewise_transformed_coefficients(pc_chart):
    z = np.array([[E - 1.0], [-(E - 1.0)], [0.3], [-0.2]])
    mu, sig = transformed_coefficients(pc_chart, z)
    np.testing.assert_allclose(mu, 0.0, atol=1e-8)
    assert sig[0, 0, 0] == pytest.approx(E, abs=1e-8)
    assert sig[1, 0, 0] == pytest.approx(E, abs=1e-8)


def test_companion_closed_forms():
    # mu_1 = 0, mu_2 = 1, unit diffusion: C_2(xi) = -2 xi, g_2 = -x1^2
    f = constant_field([0.0, 1.0], [0.0, 1.0], np.eye(2))
    chart = build_chart(f, [0.0, 0.0], 2.5, shrink=False)
    np.testing.assert_allclose(ck(chart, 2, [0.5, -1.0, 2.0], [0.3]), [-1.0, 2.0, -4.0], atol=1e-9)
    np.testing.assert_allclose(gk(chart, 2, [[2.0, 0.1], [-2.0, 0.1]]), [-4.0, -4.0], atol=1e-9)
    np.testing.assert_allclose(g1(chart, [[1.3, 0.4]]), [1.3], atol=1e-12)
    # the companion ODE mu_2 + 1/2 g_2'' = 0 holds: drift of the second component vanishes
    mu, _ = chart.coefficients_at([[0.7, 0.2], [-1.1, 0.5]])
    np.testing.assert_allclose(mu[:, 1], 0.0, atol=1e-8)


def test_component_index_validation(pc_chart, zero_chart):
    with pytest.raises(InputError):
        g1(pc_chart, [[0.1]]) and gk(pc_chart, 2, [[0.1]])
    with pytest.raises(InputError):
        ck(zero_chart, 1, [0.1], [0.0])


# ----------------------------------------------------------------------
# quadrature oracles
# ----------------------------------------------------------------------
def _quad(fn, a, b):
    val, _ = quad(fn, a, b, epsabs=1e-13, epsrel=1e-13, limit=200, points=[0.0] if a < 0 < b else None)
    return val


def _oracle(mu1, muk, a11):
    def I(x1, y):
        return _quad(lambda s: 2.0 * mu1(s, y) / a11(s, y), 0.0, x1)

    def g(x1, y):
        return _quad(lambda s: math.exp(-I(s, y)), 0.0, x1)

    def C(xi, y):
        return -_quad(lambda s: 2.0 * muk(s, y) / a11(s, y) * math.exp(I(s, y)), 0.0, xi)

    def gk_(x1, y):
        return _quad(lambda s: C(s, y) * math.exp(-I(s, y)), 0.0, x1)

    return I, g, C, gk_


def _coupled_parts():
    def mu1(s, y):
        return -0.5 + 0.2 * y if s >= 0 else 0.4 + 0.1 * y

    def mu2(s, y):
        return 1.0 + 0.3 * s if s >= 0 else 0.5 - 0.2 * s * y

    def a11(s, y):
        return (1.0 + 0.1 * y * y) ** 2

    return mu1, mu2, a11


@pytest.mark.parametrize("x1,y", [(0.6, 0.2), (-0.7, 0.5), (0.3, -0.6), (-0.2, 0.9)])
def test_coupled_components_match_quadrature(coupled_chart, x1, y):
    I, g, C, gk_ = _oracle(*_coupled_parts())
    assert inner_exponent(coupled_chart, [x1], [y])[0] == pytest.approx(I(x1, y), abs=1e-9)
    assert g1(coupled_chart, [[x1, y]])[0] == pytest.approx(g(x1, y), abs=1e-9)
    assert ck(coupled_chart, 2, [x1], [y])[0] == pytest.approx(C(x1, y), abs=1e-9)
    assert gk(coupled_chart, 2, [[x1, y]])[0] == pytest.approx(gk_(x1, y), abs=1e-9)


@pytest.mark.parametrize("u,x2", [(0.5, 0.5), (-0.5, 0.5), (0.8, 0.1), (-0.3, 1.2), (0.2, -0.3)])
def test_dividend_g1_matches_quadrature(dividend_chart, u, x2):
    # lifted coordinates: mu1 = x2 - 1{u >= 0}, a11 = (1 - q)^2, q = (1 - x2) x2
    def mu1(s, y):
        return y - (1.0 if s >= 0 else 0.0)

    def a11(s, y):
        return (1.0 - (1.0 - y) * y) ** 2

    I, g, _, _ = _oracle(mu1, lambda s, y: 0.0, a11)
    assert inner_exponent(dividend_chart, [u], [x2])[0] == pytest.approx(I(u, x2), abs=1e-9)
    assert g1(dividend_chart, [[u, x2]])[0] == pytest.approx(g(u, x2), abs=1e-9)
    # the estimate coordinate has zero drift, so g_2 vanishes
    assert gk(dividend_chart, 2, [[u, x2]])[0] == 0.0


# ----------------------------------------------------------------------
# structure of the map
# ----------------------------------------------------------------------
def test_hyperplane_is_fixed(dividend_chart, coupled_chart):
    for chart in (dividend_chart, coupled_chart):
        x = chart.center + np.array([0.0, 0.5])
        x[0] = 0.0
        np.testing.assert_allclose(apply_G(chart, x[None]), x[None], atol=1e-15)
        np.testing.assert_allclose(apply_H(chart, x[None]), x[None], atol=1e-13)


def test_gradient_is_identity_on_hyperplane(dividend_chart, coupled_chart):
    for chart in (dividend_chart, coupled_chart):
        y = chart.center[1] + np.linspace(-0.9, 0.9, 11)
        pts = np.column_stack([np.zeros_like(y), y])
        jac = grad_G(chart, pts)
        np.testing.assert_allclose(jac, np.broadcast_to(np.eye(2), jac.shape), atol=1e-8)


def test_dividend_chart_properties(dividend_chart):
    assert dividend_chart.radius == 1.0
    np.testing.assert_allclose(dividend_chart.center, [0.0, 0.5])
    assert dividend_chart.min_singular >= dividend_chart.tolerances.delta_inv
    # conversion back to the original coordinates: u = x1 - x2
    np.testing.assert_allclose(dividend_chart.to_original([[0.0, 0.5]]), [[0.5, 0.5]])


def test_points_outside_the_ball_are_rejected(pc_chart):
    with pytest.raises(ChartExitError):
        g1(pc_chart, [[1.5]])


def test_certification_fails_for_huge_forced_radius(dividend_field):
    with pytest.raises(ChartBuildError):
        build_chart(dividend_field, [0.5, 0.5], 1e3, shrink=False)


def test_shrinking_finds_a_radius():
    # strong drift: g1' = exp(-4 |x|) drops below 1e-3 beyond |x| ~ 1.73
    f = constant_field([2.0], [-2.0], [[1.0]])
    chart = build_chart(f, [0.0], 5.0)
    assert chart.radius < 1.73
    assert chart.radius == pytest.approx(5.0 * 0.7 ** round(math.log(chart.radius / 5.0, 0.7)))


def test_tighter_tolerance_refines_nodes():
    assert default_delta(1e-12) < default_delta(1e-10) <= 0.05
    with pytest.raises(InputError):
        Tolerances(quadrature=0.0)
    with pytest.raises(InputError):
        Tolerances(shrink=1.5)


def test_chart_serialisation_roundtrip(coupled_field):
    chart = build_chart(coupled_field, [0.0, 0.2], 1.0, Tolerances(quadrature=1e-6))
    data = chart.to_dict()
    again = TransformChart.from_dict(coupled_field, data)
    pts = np.array([[0.3, 0.2], [-0.5, 0.7]])
    np.testing.assert_array_equal(apply_G(again, pts), apply_G(chart, pts))
    assert dumps(again.to_dict()) == dumps(data)
