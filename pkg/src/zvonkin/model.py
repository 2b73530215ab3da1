"""Coefficient fields of piecewise-smooth SDEs and the built-in models.

A :class:`CoefficientField` describes

    dX = mu(X) dt + sigma(X) dW,    mu = mu_plus on one side, mu_minus on the other,

where the two sides are separated by the hyperplane ``{x1 = 0}`` or, when a
``switch`` surface is attached, by ``{f(x) = 0}``.  All callables are
vectorised: they take an ``(n, d)`` array and return ``(n, d)`` (drift) or
``(n, d, d)`` (diffusion).
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field as dc_field
from types import MappingProxyType
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import InputError
from .expressions import Expression

if TYPE_CHECKING:  # pragma: no cover
    from .surface import Surface

VectorField = Callable[[np.ndarray], np.ndarray]
MatrixField = Callable[[np.ndarray], np.ndarray]

BOUNDARY_CONVENTIONS = ("plus", "minus", "mean")

#: relative step of central differences for first partials of coefficients
FD_STEP = 1e-5


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Piecewise-smooth drift and smooth diffusion of a d-dimensional SDE.

    Attributes
    ----------
    dim:
        State dimension d.
    drift_plus, drift_minus:
        The two smooth drift halves, ``(n, d) -> (n, d)``.
    diffusion:
        ``(n, d) -> (n, d, d)``.
    boundary:
        Which half is used on the discontinuity set: ``"plus"`` (default),
        ``"minus"`` or ``"mean"`` (average of the halves, i.e. ``sgn(0) = 0``).
    switch:
        Optional :class:`~zvonkin.surface.Surface`; the sign of ``f(x)`` picks
        the half.  ``None`` means the hyperplane ``{x1 = 0}``.
    noise_columns:
        Indices of columns of sigma that may be nonzero.  Brownian coordinates
        outside this set are never drawn.  ``None`` means all columns.
    zero_drift:
        Drift components known to vanish identically in both halves.
    drift_plus_jac, drift_minus_jac, diffusion_jac:
        Optional analytic Jacobians ``(n, d) -> (n, d, d)`` resp.
        ``(n, d, d, d)`` (last axis = differentiation variable).  Central
        differences are used when absent.
    project:
        Optional state projection applied after every simulation step
        (used for state constraints such as the dividend model's bounds).
    joint:
        Optional fast path ``x -> (drift, sigma)`` computing both
        coefficients in one pass; must agree with :meth:`drift` (including the
        boundary convention) and :meth:`sigma`.
    """

    dim: int
    drift_plus: VectorField
    drift_minus: VectorField
    diffusion: MatrixField
    boundary: str = "plus"
    switch: Surface | None = None
    noise_columns: tuple[int, ...] | None = None
    zero_drift: tuple[int, ...] = ()
    drift_plus_jac: Callable | None = None
    drift_minus_jac: Callable | None = None
    diffusion_jac: Callable | None = None
    project: Callable[[np.ndarray], np.ndarray] | None = None
    joint: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None
    name: str = "custom"
    params: Mapping[str, Any] = dc_field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim) < 1:
            raise InputError("dimension must be a positive integer")
        object.__setattr__(self, "dim", int(self.dim))
        if self.boundary not in BOUNDARY_CONVENTIONS:
            raise InputError(f"boundary convention must be one of {BOUNDARY_CONVENTIONS}")
        if self.noise_columns is not None:
            cols = tuple(sorted({int(c) for c in self.noise_columns}))
            if any(c < 0 or c >= self.dim for c in cols):
                raise InputError("noise column index out of range")
            object.__setattr__(self, "noise_columns", cols)
        object.__setattr__(self, "zero_drift", tuple(sorted({int(c) for c in self.zero_drift})))
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    # ------------------------------------------------------------------
    def points(self, x) -> np.ndarray:
        """Validate ``x`` and return it as an ``(n, d)`` float array."""
        arr = np.asarray(x, dtype=float)
        if arr.ndim == 0 or arr.shape[-1] != self.dim:
            raise InputError(f"expected points of dimension {self.dim}, got shape {arr.shape}")
        return arr.reshape(-1, self.dim)

    def side(self, x: np.ndarray) -> np.ndarray:
        """Signed switching quantity: ``x1`` or ``f(x)`` for a switch surface."""
        pts = self.points(x)
        return pts[:, 0].copy() if self.switch is None else self.switch.f(pts)

    @property
    def active_columns(self) -> tuple[int, ...]:
        return tuple(range(self.dim)) if self.noise_columns is None else self.noise_columns

    def half(self, which: str) -> VectorField:
        if which == "plus":
            return self.drift_plus
        if which == "minus":
            return self.drift_minus
        raise InputError("half must be 'plus' or 'minus'")

    def drift(self, x) -> np.ndarray:
        """Vectorised :func:`evaluate_drift` on an ``(n, d)`` array."""
        pts = self.points(x)
        s = self.side(pts)
        plus = np.asarray(self.drift_plus(pts), dtype=float).reshape(pts.shape)
        minus = np.asarray(self.drift_minus(pts), dtype=float).reshape(pts.shape)
        out = np.where((s > 0)[:, None], plus, minus)
        on = s == 0
        if np.any(on):
            if self.boundary == "plus":
                out[on] = plus[on]
            elif self.boundary == "mean":
                out[on] = 0.5 * (plus[on] + minus[on])
        return out

    def sigma(self, x) -> np.ndarray:
        pts = self.points(x)
        return np.asarray(self.diffusion(pts), dtype=float).reshape(pts.shape[0], self.dim, self.dim)

    def coefficients(self, x) -> tuple[np.ndarray, np.ndarray]:
        """``(drift, sigma)`` at an ``(n, d)`` array of points."""
        pts = self.points(x)
        if self.joint is not None:
            return self.joint(pts)
        return self.drift(pts), self.sigma(pts)

    def a11(self, x) -> np.ndarray:
        """``(sigma sigma^T)_11`` at each point."""
        s = self.sigma(x)
        return np.einsum("nj,nj->n", s[:, 0, :], s[:, 0, :])

    # -- derivatives ----------------------------------------------------
    def drift_jacobian(self, which: str, x) -> np.ndarray:
        """Jacobian of one drift half, ``(n, d, d)`` with ``[n, k, i] = d mu_k / d x_i``."""
        pts = self.points(x)
        analytic = self.drift_plus_jac if which == "plus" else self.drift_minus_jac
        if analytic is not None:
            return np.asarray(analytic(pts), dtype=float).reshape(-1, self.dim, self.dim)
        return central_jacobian(self.half(which), pts)

    def diffusion_jacobian(self, x) -> np.ndarray:
        pts = self.points(x)
        if self.diffusion_jac is not None:
            return np.asarray(self.diffusion_jac(pts), dtype=float).reshape(-1, self.dim, self.dim, self.dim)
        return central_jacobian(self.sigma, pts)


def central_jacobian(fn: Callable[[np.ndarray], np.ndarray], pts: np.ndarray, rel_step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of a vectorised map; derivative axis last."""
    pts = np.asarray(pts, dtype=float)
    n, d = pts.shape
    h = rel_step * (1.0 + np.linalg.norm(pts, axis=1))
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        step = h[:, None] * e
        fp = np.asarray(fn(pts + step), dtype=float)
        fm = np.asarray(fn(pts - step), dtype=float)
        shape = (n,) + (1,) * (fp.ndim - 1)
        cols.append((fp - fm) / (2.0 * h.reshape(shape)))
    return np.stack(cols, axis=-1)


def evaluate_drift(field: CoefficientField, x) -> np.ndarray:
    """Drift at a point (or ``(n, d)`` array of points) with the side selected by sign.

    Returns ``mu_plus(x)`` where ``x1 > 0`` (or ``f(x) > 0``), ``mu_minus(x)``
    where it is negative, and the field's boundary convention on the set itself.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] != field.dim:
        raise InputError(f"expected a point of dimension {field.dim}, got shape {arr.shape}")
    out = field.drift(arr)
    return out.reshape(arr.shape)


# ----------------------------------------------------------------------
# constructors
# ----------------------------------------------------------------------
def _const_vector(values: Sequence[float]) -> VectorField:
    vec = np.asarray(values, dtype=float)

    def fn(x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(vec, (np.asarray(x).reshape(-1, vec.size).shape[0], vec.size)).copy()

    return fn


def _const_matrix(values) -> MatrixField:
    mat = np.asarray(values, dtype=float)
    d = mat.shape[0]

    def fn(x: np.ndarray) -> np.ndarray:
        n = np.asarray(x).reshape(-1, d).shape[0]
        return np.broadcast_to(mat, (n, d, d)).copy()

    return fn


def constant_field(drift_plus, drift_minus=None, diffusion=None, *, boundary: str = "plus", name: str = "constant") -> CoefficientField:
    """Field with constant halves and constant diffusion (identity by default)."""
    mp = np.atleast_1d(np.asarray(drift_plus, dtype=float))
    mm = mp if drift_minus is None else np.atleast_1d(np.asarray(drift_minus, dtype=float))
    d = mp.size
    sig = np.eye(d) if diffusion is None else np.asarray(diffusion, dtype=float).reshape(d, d)
    zero = tuple(k for k in range(d) if mp[k] == 0.0 and mm[k] == 0.0)
    cols = tuple(j for j in range(d) if np.any(sig[:, j] != 0.0))
    return CoefficientField(
        dim=d,
        drift_plus=_const_vector(mp),
        drift_minus=_const_vector(mm),
        diffusion=_const_matrix(sig),
        boundary=boundary,
        noise_columns=cols,
        zero_drift=zero,
        drift_plus_jac=lambda x: np.zeros((np.asarray(x).reshape(-1, d).shape[0], d, d)),
        drift_minus_jac=lambda x: np.zeros((np.asarray(x).reshape(-1, d).shape[0], d, d)),
        diffusion_jac=lambda x: np.zeros((np.asarray(x).reshape(-1, d).shape[0], d, d, d)),
        name=name,
    )


def piecewise_constant(a: float = 0.5, sigma: float = 1.0, m: float = 0.0, dim: int = 1) -> CoefficientField:
    """``mu_1 = -a sgn(x1)``, ``mu_k = m`` (k >= 2), ``sigma = sigma * I``.

    With ``a = 1/2`` and unit diffusion the first transform component has the
    closed form ``g1(x) = sgn(x1) (exp|x1| - 1)``.
    """
    if dim < 1:
        raise InputError("dim must be >= 1")
    plus = np.full(dim, float(m))
    minus = plus.copy()
    plus[0], minus[0] = -float(a), float(a)
    field = constant_field(plus, minus, float(sigma) * np.eye(dim), name="piecewise-constant-1d" if dim == 1 else "piecewise-constant")
    return _with(field, params={"a": float(a), "sigma": float(sigma), "m": float(m), "dim": dim})


def counterexample() -> CoefficientField:
    """Two-dimensional field whose drift jumps across ``{x1 + x2 = 0}``.

    ``dX1 = (1/2 - sgn(X1 + X2)) dt + dW``, ``dX2 = -dW`` (shared noise), so the
    sum ``X1 + X2`` has no diffusion and the discontinuity is hit tangentially.
    The boundary convention is ``sgn(0) = 0``.
    """
    from .surface import Surface

    surface = Surface.plane([1.0, 1.0])
    field = constant_field([-0.5, 0.0], [1.5, 0.0], [[1.0, 0.0], [-1.0, 0.0]], boundary="mean", name="counterexample")
    return _with(field, switch=surface)


class Polynomial1D:
    """Threshold ``b(y) = sum_i c_i y^i`` with exact derivatives."""

    def __init__(self, coeffs: Sequence[float]):
        self.poly = np.polynomial.Polynomial(np.asarray(coeffs, dtype=float))
        self.d1 = self.poly.deriv(1)
        self.d2 = self.poly.deriv(2)
        self.d3 = self.poly.deriv(3)

    def __call__(self, y):
        return self.poly(np.asarray(y, dtype=float))

    @property
    def coeffs(self) -> list[float]:
        return [float(c) for c in self.poly.coef]


def dividend(
    kappa: float = 1.0,
    sigma: float = 1.0,
    theta1: float = 0.0,
    theta2: float = 1.0,
    b: Sequence[float] | Polynomial1D = (0.0, 1.0),
    clamp: bool = True,
) -> CoefficientField:
    """Firm value with an unobserved drift and a threshold dividend strategy.

    State ``(X1, X2)``: firm value and filtered drift estimate.

        dX1 = (X2 - kappa 1{X1 >= b(X2)}) dt + s dW
        dX2 = (theta2 - X2)(X2 - theta1)/s dW

    Both equations are driven by the same Brownian motion, so sigma has a
    zero second column.  ``b`` is a polynomial threshold given by its
    coefficients (default ``b(y) = y``).  With ``clamp`` the estimate ``X2`` is
    projected back to ``[theta1, theta2]`` after each step.
    """
    from .surface import Surface

    s = float(sigma)
    if s == 0.0:
        raise InputError("dividend model needs sigma != 0")
    k, t1, t2 = float(kappa), float(theta1), float(theta2)
    if not t1 < t2:
        raise InputError("dividend model needs theta1 < theta2")
    bpoly = b if isinstance(b, Polynomial1D) else Polynomial1D(b)

    def mu_plus(x):
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        out = np.zeros_like(x)
        out[:, 0] = x[:, 1] - k
        return out

    def mu_minus(x):
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        out = np.zeros_like(x)
        out[:, 0] = x[:, 1]
        return out

    def mu_jac(x):
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 1] = 1.0
        return out

    def diff(x):
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        y = x[:, 1]
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = s
        out[:, 1, 0] = (t2 - y) * (y - t1) / s
        return out

    def diff_jac(x):
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        y = x[:, 1]
        out = np.zeros((x.shape[0], 2, 2, 2))
        out[:, 1, 0, 1] = (t1 + t2 - 2.0 * y) / s
        return out

    def project(x):
        x = np.array(x, dtype=float, copy=True)
        np.clip(x[..., 1], t1, t2, out=x[..., 1])
        return x

    def joint(x):
        y = x[:, 1]
        mu = np.zeros_like(x)
        mu[:, 0] = y - k * (x[:, 0] >= bpoly(y))
        return mu, diff(x)

    surface = Surface.graph(bpoly)
    return CoefficientField(
        dim=2,
        drift_plus=mu_plus,
        drift_minus=mu_minus,
        diffusion=diff,
        boundary="plus",
        switch=surface,
        noise_columns=(0,),
        zero_drift=(1,),
        drift_plus_jac=mu_jac,
        drift_minus_jac=mu_jac,
        diffusion_jac=diff_jac,
        project=project if clamp else None,
        joint=joint,
        name="dividend",
        params={"kappa": k, "sigma": s, "theta1": t1, "theta2": t2, "b": bpoly.coeffs, "clamp": bool(clamp)},
    )


def expression_field(
    dim: int,
    drift_plus: Sequence[str],
    drift_minus: Sequence[str] | None,
    diffusion: Sequence[Sequence[str]],
    params: Mapping[str, float] | None = None,
    boundary: str = "plus",
    switch: Surface | None = None,
    name: str = "expression",
) -> CoefficientField:
    """Field whose entries are arithmetic expression strings in ``x1..xd``."""
    d = int(dim)
    drift_minus = drift_plus if drift_minus is None else drift_minus
    if len(drift_plus) != d or len(drift_minus) != d:
        raise InputError(f"drift must have {d} entries")
    if len(diffusion) != d or any(len(row) != d for row in diffusion):
        raise InputError(f"diffusion must be a {d}x{d} array of expressions")
    ep = [Expression(str(e), d, params) for e in drift_plus]
    em = [Expression(str(e), d, params) for e in drift_minus]
    es = [[Expression(str(e), d, params) for e in row] for row in diffusion]

    def vec(exprs):
        def fn(x):
            pts = np.asarray(x, dtype=float).reshape(-1, d)
            return np.stack([e(pts) for e in exprs], axis=1)

        return fn

    def mat(x):
        pts = np.asarray(x, dtype=float).reshape(-1, d)
        return np.stack([np.stack([e(pts) for e in row], axis=1) for row in es], axis=1)

    def is_zero(e: Expression) -> bool:
        return e.is_constant and float(e(np.zeros((1, d)))[0]) == 0.0

    zero = tuple(k for k in range(d) if is_zero(ep[k]) and is_zero(em[k]))
    cols = tuple(j for j in range(d) if not all(is_zero(es[i][j]) for i in range(d)))
    return CoefficientField(
        dim=d,
        drift_plus=vec(ep),
        drift_minus=vec(em),
        diffusion=mat,
        boundary=boundary,
        switch=switch,
        noise_columns=cols,
        zero_drift=zero,
        name=name,
        params=dict(params or {}),
    )


def _with(field: CoefficientField, **changes) -> CoefficientField:
    from dataclasses import replace

    return replace(field, **changes)


BUILTIN_MODELS = {
    "dividend": dividend,
    "counterexample": counterexample,
    "piecewise-constant-1d": piecewise_constant,
}


def builtin(name: str, **params) -> CoefficientField:
    """Construct a built-in model by name."""
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise InputError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise InputError(f"bad parameters for model {name!r}: {exc}") from None
