import numpy as np
import pytest

from zvonkin.errors import InputError
from zvonkin.model import Polynomial1D, constant_field, dividend, expression_field
from zvonkin.surface import Surface, SurfaceChart, flatten


def test_identity_surface_inverse():
    chart = SurfaceChart(Surface.plane([1.0, 0.0]))
    np.testing.assert_allclose(chart.solve_e([0.7], [[0.2]]), [0.7])


def test_graph_surface_inverse():
    chart = SurfaceChart(Surface.graph(Polynomial1D([0.0, 1.0])))
    assert chart.solve_e([0.3], [[0.5]])[0] == pytest.approx(0.8, abs=1e-14)


def test_scaled_plane_inverse():
    chart = SurfaceChart(Surface.plane([2.0, 0.0]))
    assert chart.solve_e([1.0], [[3.0]])[0] == pytest.approx(0.5, abs=1e-14)


def test_nonlinear_expression_surface_roundtrip():
    chart = SurfaceChart(Surface.expression("x1 + 0.1*x1^3 - x2^2", 2))
    x = np.array([[0.4, 0.3], [-1.2, 0.8], [2.0, -1.0]])
    y = chart.to_lifted(x)
    np.testing.assert_allclose(y[:, 0], x[:, 0] + 0.1 * x[:, 0] ** 3 - x[:, 1] ** 2)
    np.testing.assert_allclose(chart.to_original(y), x, atol=1e-12)


def test_plane_needs_nonzero_first_normal():
    with pytest.raises(InputError):
        Surface.plane([0.0, 1.0])


def test_graph_gradient_and_hessian():
    s = Surface.graph(Polynomial1D([0.0, 0.0, 1.0]))  # x1 - x2^2
    np.testing.assert_allclose(s.grad([[0.0, 3.0]])[0], [1.0, -6.0])
    np.testing.assert_allclose(s.hess([[0.0, 3.0]])[0], [[0.0, 0.0], [0.0, -2.0]])


def test_flat_surface_lift_is_identity():
    f = expression_field(2, ["x2", "1"], ["-x2", "x1"], [["1", "0.5"], ["0", "1"]], switch=Surface.plane([1.0, 0.0]))
    chart = SurfaceChart(f.switch)
    y = np.array([[0.3, 0.2], [-0.4, 1.0]])
    mu_p, mu_m, sig = chart.lifted_coefficients(f, y)
    np.testing.assert_allclose(mu_p, f.half("plus")(y))
    np.testing.assert_allclose(mu_m, f.half("minus")(y))
    np.testing.assert_allclose(sig, f.sigma(y))


@pytest.mark.parametrize("x2", [0.1, 0.5, 0.9])
def test_dividend_lift_closed_form(x2):
    kappa, s = 1.0, 1.5
    f = dividend(kappa=kappa, sigma=s, b=(0.2, 1.0))
    chart = SurfaceChart(f.switch)
    y = np.array([[0.3, x2], [-0.3, x2]])
    lifted = chart.lift_coefficients(f)
    mu, sig = lifted.coefficients(y)
    q = (1.0 - x2) * (x2 - 0.0)
    np.testing.assert_allclose(mu[:, 0], [x2 - kappa, x2], atol=1e-12)
    np.testing.assert_allclose(mu[:, 1], 0.0, atol=1e-15)
    np.testing.assert_allclose(sig[:, 0, 0], s - q / s, atol=1e-12)
    np.testing.assert_allclose(sig[:, 1, 0], q / s, atol=1e-12)


def test_curved_surface_adds_ito_correction():
    # f = x1 - x2^2 with sigma = I: bar mu_1 = mu_1 - 2 x2 mu_2 + 1/2 tr(sigma^T hess f sigma) = mu_1 - 2 x2 mu_2 - 1
    f = constant_field([0.5, 1.0], [0.5, 1.0], np.eye(2))
    f = f.__class__(**{**f.__dict__, "switch": Surface.graph(Polynomial1D([0.0, 0.0, 1.0]))})
    chart = SurfaceChart(f.switch)
    mu_p, _, _ = chart.lifted_coefficients(f, [[0.2, 0.7]])
    assert mu_p[0, 0] == pytest.approx(0.5 - 2 * 0.7 * 1.0 - 1.0, abs=1e-9)


def test_flatten_without_switch_is_noop():
    f = constant_field([0.0], None, [[1.0]])
    flat, chart = flatten(f)
    assert chart is None and flat is f


def test_explicit_inverse_agrees_with_newton():
    b = Polynomial1D([0.1, -0.5, 0.3])
    explicit = Surface.graph(b)
    newton = Surface(explicit.dim, explicit.f, explicit.grad_f, explicit.hess_f)
    u, rest = np.array([0.4, -1.3, 2.0]), np.array([[0.2], [-0.7], [1.5]])
    np.testing.assert_allclose(SurfaceChart(explicit).solve_e(u, rest), SurfaceChart(newton).solve_e(u, rest), atol=1e-12)
    plane = Surface.plane([2.0, -1.0, 0.5], offset=0.3)
    rest3 = np.array([[0.2, 0.1]])
    x1 = SurfaceChart(plane).solve_e([0.7], rest3)
    assert plane.value(np.concatenate([x1, rest3[0]]))[0] == pytest.approx(0.7, abs=1e-14)
