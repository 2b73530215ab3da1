"""Shared fixtures: charts are built once per session (they are read-only)."""

import numpy as np
import pytest

from zvonkin.model import constant_field, dividend, expression_field, piecewise_constant
from zvonkin.transform import build_chart


@pytest.fixture(scope="session")
def dividend_field():
    return dividend()


@pytest.fixture(scope="session")
def dividend_chart(dividend_field):
    return build_chart(dividend_field, [0.5, 0.5], 1.0)


@pytest.fixture(scope="session")
def pc_field():
    """1d piecewise-constant drift -sgn(x)/2 with unit diffusion."""
    return piecewise_constant(a=0.5, sigma=1.0)


@pytest.fixture(scope="session")
def pc_chart(pc_field):
    return build_chart(pc_field, [0.0], 1.0)


@pytest.fixture(scope="session")
def zero_field():
    return constant_field([0.0, 0.0], None, np.eye(2), name="zero")


@pytest.fixture(scope="session")
def zero_chart(zero_field):
    return build_chart(zero_field, [0.0, 0.0], 1.0)


@pytest.fixture(scope="session")
def coupled_field():
    """2d field with x-dependent drift on both sides and a nonconstant a11.

    Both G components are nontrivial, which exercises C_2 and g_2.
    """
    return expression_field(
        2,
        ["-0.5 + 0.2*x2", "1 + 0.3*x1"],
        ["0.4 + 0.1*x2", "0.5 - 0.2*x1*x2"],
        [["1 + 0.1*x2^2", "0"], ["0", "1"]],
        name="coupled",
    )


@pytest.fixture(scope="session")
def coupled_chart(coupled_field):
    return build_chart(coupled_field, [0.0, 0.2], 1.0)
