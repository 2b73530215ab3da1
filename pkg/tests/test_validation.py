import numpy as np
import pytest

from zvonkin.errors import InputError
from zvonkin.model import constant_field, counterexample, dividend, expression_field
from zvonkin.surface import Surface, SurfaceChart
from zvonkin.validation import (
    ValidationReport,
    box_grid,
    multiscale_grid,
    validate_ellipticity,
    validate_growth,
    validate_smoothness,
    validate_transversality,
)

GRID_2D = box_grid([0.0, 0.5], 1.0, 7)


def test_ellipticity_identity():
    f = constant_field([0.0, 0.0], None, np.eye(2))
    rep = validate_ellipticity(f, GRID_2D, 0.5)
    assert rep.ellipticity_floor == 1.0 and rep.passed


def test_ellipticity_shared_noise_counterexample():
    rep = validate_ellipticity(counterexample(), GRID_2D, 0.5)
    assert rep.ellipticity_floor == 1.0 and rep.passed


def test_ellipticity_degenerate_first_row():
    f = constant_field([0.0, 0.0], None, [[0.0, 1.0], [0.0, 1.0]])
    f0 = constant_field([0.0, 0.0], None, [[0.0, 0.0], [0.0, 1.0]])
    assert validate_ellipticity(f, GRID_2D, 0.1).passed  # (0, 1) still has unit norm
    rep = validate_ellipticity(f0, GRID_2D, 0.1)
    assert rep.ellipticity_floor == 0.0 and not rep.passed


def test_ellipticity_rejects_nonpositive_constant():
    with pytest.raises(InputError):
        validate_ellipticity(constant_field([0.0], None, [[1.0]]), [[0.0]], 0.0)


GROWTH_GRID = np.array([[-4.0], [-2.0], [-1.0], [1.0], [2.0], [4.0]])


def test_growth_zero_drift():
    rep = validate_growth(constant_field([0.0], None, [[1.0]]), GROWTH_GRID)
    assert rep.growth_constants == (0.0, 0.0) and rep.growth_excess == 0.0


def test_growth_linear_drift_fits_exactly():
    rep = validate_growth(expression_field(1, ["x1"], None, [["1"]]), GROWTH_GRID)
    d1, d2 = rep.growth_constants
    assert d2 >= 1.0 - 1e-12
    assert rep.growth_excess == 0.0
    assert rep.verdict["growth"]


def test_growth_quadratic_drift_has_excess():
    rep = validate_growth(expression_field(1, ["x1^2"], None, [["1"]]), GROWTH_GRID)
    assert rep.growth_excess > 0.0
    # advisory: growth does not decide the overall verdict
    assert not rep.verdict["growth"] and rep.passed


def test_smoothness_polynomial_and_constant_sigma_pass():
    f = expression_field(2, ["x1^2 + x2^3", "x2"], ["1 - x2^2", "0"], [["1", "0"], ["0", "2"]])
    rep = validate_smoothness(f, GRID_2D, order=3)
    assert rep.passed and all(rep.smoothness_flags.values())


def test_smoothness_kink_fails():
    f = expression_field(2, ["abs(x2)", "0"], ["0", "0"], [["1", "0"], ["0", "1"]])
    # points just off the kink, closer than the difference step
    grid = np.array([[0.5, 1e-4], [0.7, -2e-4], [0.5, 0.5]])
    rep = validate_smoothness(f, grid, order=1)
    assert rep.smoothness_flags["mu1_plus"] is False
    assert rep.smoothness_flags["mu1_minus"] is True
    assert not rep.passed


def test_transversality_flat_surface():
    f = constant_field([0.0, 0.0], None, np.eye(2))
    rep = validate_transversality(SurfaceChart(Surface.plane([1.0, 0.0])), f, GRID_2D, 1.0)
    assert rep.transversality_floor == pytest.approx(1.0) and rep.passed


def test_transversality_dividend_value():
    f = dividend(sigma=1.0, theta1=0.0, theta2=1.0)
    chart = SurfaceChart(f.switch)
    rep = validate_transversality(chart, f, [[0.5, 0.5]], 0.5)
    # grad f = (1, -1); sigma column 1 = (1, 0.25) -> (1 - 0.25)^2
    assert rep.transversality_floor == pytest.approx(0.5625, abs=1e-12)
    assert rep.passed


def test_transversality_tangential_noise_fails():
    # b(y) = 4y: s - b' q / s = 1 - 4 * 0.25 = 0 at x2 = 0.5
    f = dividend(b=(0.0, 4.0))
    rep = validate_transversality(SurfaceChart(f.switch), f, box_grid([2.0, 0.5], 0.5, 5), 0.1)
    assert rep.transversality_floor == pytest.approx(0.0, abs=1e-12)
    assert not rep.passed


def test_report_merge_and_dict():
    a = ValidationReport(ellipticity_floor=1.0, verdict={"ellipticity": True})
    b = ValidationReport(growth_excess=0.3, verdict={"growth": False}, notes=["n"])
    m = a.merge(b)
    assert m.ellipticity_floor == 1.0 and m.growth_excess == 0.3
    d = m.to_dict()
    assert d["passed"] is True and d["notes"] == ["n"]


def test_grids():
    g = box_grid([0.0, 1.0], 1.0, 3)
    assert g.shape == (9, 2)
    np.testing.assert_allclose(g.min(axis=0), [-1.0, 0.0])
    m = multiscale_grid(3, scales=(1.0, 2.0), n_dirs=5)
    np.testing.assert_allclose(np.sort(np.linalg.norm(m, axis=1)), [1.0] * 5 + [2.0] * 5)
