import numpy as np
import pytest

from zvonkin.errors import InputError
from zvonkin.expressions import Expression
from zvonkin.model import builtin, constant_field, counterexample, dividend, evaluate_drift, piecewise_constant
from zvonkin.surface import SurfaceChart


def test_sign_selection_and_plus_convention():
    f = constant_field([1.0], [-1.0], [[1.0]])
    assert evaluate_drift(f, [[0.5]])[0, 0] == 1.0
    assert evaluate_drift(f, [[-0.5]])[0, 0] == -1.0
    # the hyperplane itself belongs to the plus side
    assert evaluate_drift(f, [[0.0]])[0, 0] == 1.0


def test_boundary_conventions():
    minus = constant_field([1.0], [-1.0], [[1.0]], boundary="minus")
    mean = constant_field([1.0], [-1.0], [[1.0]], boundary="mean")
    assert minus.drift([[0.0]])[0, 0] == -1.0
    assert mean.drift([[0.0]])[0, 0] == 0.0


def test_dividend_drift_in_lifted_coordinates():
    # (u, x2) = (0.3, 0.5): the indicator 1{u >= 0} is on, so mu1 = x2 - kappa
    f = dividend(kappa=1.0)
    chart = SurfaceChart(f.switch)
    mu_p, mu_m, _ = chart.lifted_coefficients(f, [[0.3, 0.5]])
    lifted = chart.lift_coefficients(f)
    np.testing.assert_allclose(lifted.drift([[0.3, 0.5]])[0], [-0.5, 0.0], atol=1e-12)
    np.testing.assert_allclose(mu_p[0], [-0.5, 0.0], atol=1e-12)
    np.testing.assert_allclose(mu_m[0], [0.5, 0.0], atol=1e-12)


def test_dividend_original_coordinates_use_threshold():
    f = dividend(kappa=1.0, b=(0.0, 1.0))
    # x1 >= b(x2) = x2 switches the dividend on
    mu = f.drift([[0.8, 0.5], [0.2, 0.5]])
    np.testing.assert_allclose(mu[:, 0], [-0.5, 0.5])
    np.testing.assert_allclose(mu[:, 1], [0.0, 0.0])


def test_dividend_diffusion_shares_one_noise():
    f = dividend(sigma=2.0, theta1=0.0, theta2=1.0)
    sig = f.sigma([[0.0, 0.5]])[0]
    np.testing.assert_allclose(sig, [[2.0, 0.0], [0.125, 0.0]])
    assert f.active_columns == (0,)


def test_dividend_clamp_projects_estimate():
    f = dividend(theta1=0.0, theta2=1.0)
    out = f.project(np.array([[0.3, -0.2], [0.1, 1.4], [0.0, 0.5]]))
    np.testing.assert_allclose(out[:, 1], [0.0, 1.0, 0.5])
    assert dividend(clamp=False).project is None


def test_dividend_rejects_bad_parameters():
    with pytest.raises(InputError):
        dividend(sigma=0.0)
    with pytest.raises(InputError):
        dividend(theta1=1.0, theta2=0.5)


def test_piecewise_constant_shape():
    f = piecewise_constant(a=0.5, sigma=1.0, m=1.0, dim=2)
    mu = f.drift([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_allclose(mu, [[-0.5, 1.0], [0.5, 1.0]])
    np.testing.assert_allclose(f.sigma([[0.0, 0.0]])[0], np.eye(2))


def test_counterexample_switches_on_the_sum():
    f = counterexample()
    mu = f.drift([[0.2, 0.1], [0.2, -0.5], [0.3, -0.3]])
    np.testing.assert_allclose(mu[:, 0], [-0.5, 1.5, 0.5])
    sig = f.sigma([[0.0, 0.0]])[0]
    # X1 + X2 carries no noise
    np.testing.assert_allclose(sig[0] + sig[1], [0.0, 0.0])


def test_builtin_lookup():
    assert builtin("dividend", kappa=2.0).params["kappa"] == 2.0
    with pytest.raises(InputError):
        builtin("no-such-model")


def test_a11_is_first_row_norm():
    f = constant_field([0.0, 0.0], None, [[1.0, 2.0], [0.0, 1.0]])
    assert f.a11([[0.3, 0.4]])[0] == pytest.approx(5.0)


def test_expression_evaluation():
    e = Expression("2*x1 - x2^2 + sgn(x1) * abs(x2) + exp(0)", 2)
    pts = np.array([[1.0, 2.0], [-1.0, -3.0]])
    np.testing.assert_allclose(e(pts), [2 - 4 + 2 + 1, -2 - 9 - 3 + 1])


def test_expression_params_and_errors():
    e = Expression("k*x1", 1, params={"k": 3.0})
    assert e(np.array([[2.0]]))[0] == 6.0
    with pytest.raises(InputError):
        Expression("x3", 2)
    with pytest.raises(InputError):
        Expression("__import__('os')", 1)
    with pytest.raises(InputError):
        Expression("x1 +", 1)
    with pytest.raises(InputError):
        Expression("unknown(x1)", 1)
