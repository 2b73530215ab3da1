"""Discontinuity surfaces and the lift that flattens them to a hyperplane.

For a surface ``{f(x) = 0}`` with ``df/dx1 != 0`` the change of variables
``u = f(x)`` (other coordinates unchanged) turns a drift that jumps across
the surface into one that jumps across ``{u = 0}``.  Its inverse in the first
coordinate, ``x1 = e(u, x_rest)``, is explicit for planes and graphs and is
computed by Newton's method otherwise.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import InputError, SurfaceError
from .expressions import Expression
from .model import FD_STEP, CoefficientField, Polynomial1D

ScalarField = Callable[[np.ndarray], np.ndarray]

#: relative step for central second differences of f (first differences use FD_STEP)
FD_STEP_2 = 1e-4


def _fd_grad(f: ScalarField, pts: np.ndarray) -> np.ndarray:
    n, d = pts.shape
    h = FD_STEP * (1.0 + np.linalg.norm(pts, axis=1))
    out = np.empty((n, d))
    for i in range(d):
        step = np.zeros((n, d))
        step[:, i] = h
        out[:, i] = (f(pts + step) - f(pts - step)) / (2.0 * h)
    return out


def _fd_hess(f: ScalarField, pts: np.ndarray) -> np.ndarray:
    n, d = pts.shape
    h = FD_STEP_2 * (1.0 + np.linalg.norm(pts, axis=1))
    out = np.empty((n, d, d))
    f0 = f(pts)
    for i in range(d):
        ei = np.zeros((n, d))
        ei[:, i] = h
        out[:, i, i] = (f(pts + ei) - 2.0 * f0 + f(pts - ei)) / h**2
        for j in range(i + 1, d):
            ej = np.zeros((n, d))
            ej[:, j] = h
            val = (f(pts + ei + ej) - f(pts + ei - ej) - f(pts - ei + ej) + f(pts - ei - ej)) / (4.0 * h**2)
            out[:, i, j] = out[:, j, i] = val
    return out


@dataclass(frozen=True, eq=False)
class Surface:
    """A scalar field ``f`` whose zero set carries the drift discontinuity."""

    dim: int
    f: ScalarField
    grad_f: ScalarField | None = None
    hess_f: ScalarField | None = None
    description: str = "custom"
    spec: dict | None = None
    #: explicit ``e(u, x_rest)`` when known (``x_rest`` has shape ``(n, dim - 1)``)
    inverse: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def value(self, x) -> np.ndarray:
        return np.asarray(self.f(np.asarray(x, dtype=float).reshape(-1, self.dim)), dtype=float)

    def grad(self, x) -> np.ndarray:
        pts = np.asarray(x, dtype=float).reshape(-1, self.dim)
        if self.grad_f is not None:
            return np.asarray(self.grad_f(pts), dtype=float).reshape(-1, self.dim)
        return _fd_grad(self.f, pts)

    def hess(self, x) -> np.ndarray:
        pts = np.asarray(x, dtype=float).reshape(-1, self.dim)
        if self.hess_f is not None:
            return np.asarray(self.hess_f(pts), dtype=float).reshape(-1, self.dim, self.dim)
        return _fd_hess(self.f, pts)

    # -- constructors -----------------------------------------------------
    @classmethod
    def plane(cls, normal: Sequence[float], offset: float = 0.0) -> "Surface":
        """``f(x) = normal . x - offset``; ``normal[0]`` must be nonzero."""
        nvec = np.asarray(normal, dtype=float)
        if nvec.ndim != 1 or nvec[0] == 0.0:
            raise InputError("plane normal must have a nonzero first component")
        d = nvec.size
        c = float(offset)
        return cls(
            dim=d,
            f=lambda x: np.asarray(x, dtype=float).reshape(-1, d) @ nvec - c,
            grad_f=lambda x: np.broadcast_to(nvec, np.asarray(x).reshape(-1, d).shape).copy(),
            hess_f=lambda x: np.zeros((np.asarray(x).reshape(-1, d).shape[0], d, d)),
            description=f"plane normal={nvec.tolist()} offset={c}",
            spec={"kind": "plane", "normal": nvec.tolist(), "offset": c},
            inverse=lambda u, rest: (u + c - rest @ nvec[1:]) / nvec[0],
        )

    @classmethod
    def graph(cls, b: Polynomial1D | Expression | Callable, dim: int = 2) -> "Surface":
        """``f(x) = x1 - b(x2)``.

        A :class:`~zvonkin.model.Polynomial1D` threshold gives exact
        derivatives; any other callable of ``y`` is differentiated numerically.
        """
        d = int(dim)
        if d < 2:
            raise InputError("a graph surface needs dim >= 2")

        def f(x):
            x = np.asarray(x, dtype=float).reshape(-1, d)
            return x[:, 0] - np.asarray(b(x[:, 1]), dtype=float)

        def inverse(u, rest):
            return u + np.asarray(b(rest[:, 0]), dtype=float)

        if isinstance(b, Polynomial1D):

            def grad(x):
                x = np.asarray(x, dtype=float).reshape(-1, d)
                out = np.zeros_like(x)
                out[:, 0] = 1.0
                out[:, 1] = -b.d1(x[:, 1])
                return out

            def hess(x):
                x = np.asarray(x, dtype=float).reshape(-1, d)
                out = np.zeros((x.shape[0], d, d))
                out[:, 1, 1] = -b.d2(x[:, 1])
                return out

            spec = {"kind": "graph", "b": b.coeffs}
            return cls(d, f, grad, hess, description=f"graph x1 = b(x2), b coeffs {b.coeffs}", spec=spec, inverse=inverse)
        spec = {"kind": "graph", "b": getattr(b, "source", None)}
        return cls(d, f, None, None, description="graph x1 = b(x2)", spec=spec, inverse=inverse)

    @classmethod
    def expression(cls, source: str, dim: int, params=None) -> "Surface":
        expr = Expression(source, dim, params)
        return cls(dim, expr, description=f"f(x) = {source}", spec={"kind": "expression", "f": source})


class SurfaceChart:
    """Coordinates ``(u, x_rest)`` with ``u = f(x)`` and inverse ``x1 = e(u, x_rest)``.

    Parameters
    ----------
    surface:
        The discontinuity surface.
    tol:
        Newton tolerance on ``|f(e(u, x_rest), x_rest) - u|`` (relative to ``1 + |u|``).
    max_iter:
        Newton iteration cap.
    """

    def __init__(self, surface: Surface, tol: float = 1e-12, max_iter: int = 50):
        if tol <= 0:
            raise InputError("tolerance must be positive")
        self.surface = surface
        self.dim = surface.dim
        self.tol = float(tol)
        self.max_iter = int(max_iter)

    def solve_e(self, u, x_rest) -> np.ndarray:
        """First coordinate ``x1`` with ``f(x1, x_rest) = u`` (vectorised)."""
        u = np.atleast_1d(np.asarray(u, dtype=float)).ravel()
        if self.dim > 1:
            rest = np.asarray(x_rest, dtype=float).reshape(-1, self.dim - 1)
            n = max(u.size, rest.shape[0])
            u, rest = np.broadcast_to(u, (n,)), np.broadcast_to(rest, (n, self.dim - 1))
        else:
            rest = np.zeros((u.size, 0))
        if self.surface.inverse is not None:
            return np.asarray(self.surface.inverse(u, rest), dtype=float).reshape(u.shape[0]).copy()
        pts = np.empty((u.shape[0], self.dim))
        pts[:, 0] = u
        pts[:, 1:] = rest
        todo = np.arange(u.shape[0])
        for _ in range(self.max_iter + 1):
            sub = pts[todo]
            resid = self.surface.value(sub) - u[todo]
            ok = np.abs(resid) <= self.tol * (1.0 + np.abs(u[todo]))
            todo, sub, resid = todo[~ok], sub[~ok], resid[~ok]
            if todo.size == 0:
                return pts[:, 0].copy()
            slope = self.surface.grad(sub)[:, 0]
            if np.any(~np.isfinite(slope)) or np.any(slope == 0.0):
                break
            pts[todo, 0] = sub[:, 0] - resid / slope
        bad = pts[todo[0]] if todo.size else None
        raise SurfaceError(f"inverse of the surface map failed to converge near {bad}")

    def to_lifted(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        out = x.copy()
        out[:, 0] = self.surface.value(x)
        return out

    def to_original(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float).reshape(-1, self.dim)
        out = y.copy()
        out[:, 0] = self.solve_e(y[:, 0], y[:, 1:])
        return out

    # ------------------------------------------------------------------
    def _lift_parts(self, field: CoefficientField, y):
        x = self.to_original(y)
        gf = self.surface.grad(x)
        sig = field.sigma(x)
        amat = sig @ np.transpose(sig, (0, 2, 1))
        curv = 0.5 * np.einsum("nij,nij->n", amat, self.surface.hess(x))
        bsig = sig.copy()
        bsig[:, 0, :] = np.einsum("ni,nij->nj", gf, sig)
        return x, gf, curv, bsig

    @staticmethod
    def _lift_drift(mu, gf, curv):
        bar = mu.copy()
        bar[:, 0] = np.einsum("ni,ni->n", mu, gf) + curv
        return bar

    def lifted_coefficients(self, field: CoefficientField, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(bar_mu_plus, bar_mu_minus, bar_sigma)`` at lifted points ``y``."""
        x, gf, curv, bsig = self._lift_parts(field, y)
        out = []
        for half in (field.drift_plus, field.drift_minus):
            mu = np.asarray(half(x), dtype=float).reshape(x.shape)
            out.append(self._lift_drift(mu, gf, curv))
        return out[0], out[1], bsig

    def lifted_joint(self, field: CoefficientField, y) -> tuple[np.ndarray, np.ndarray]:
        """Lifted drift (plus half on ``u >= 0``) and diffusion in one pass."""
        y = np.asarray(y, dtype=float).reshape(-1, self.dim)
        x, gf, curv, bsig = self._lift_parts(field, y)
        mu = np.empty_like(x)
        plus = y[:, 0] >= 0.0
        if np.any(plus):
            mu[plus] = np.asarray(field.drift_plus(x[plus]), dtype=float).reshape(-1, self.dim)
        if not np.all(plus):
            mu[~plus] = np.asarray(field.drift_minus(x[~plus]), dtype=float).reshape(-1, self.dim)
        return self._lift_drift(mu, gf, curv), bsig

    def lift_coefficients(self, field: CoefficientField) -> CoefficientField:
        """The field in ``(u, x_rest)`` coordinates, discontinuous across ``{u = 0}``."""
        if field.dim != self.dim:
            raise InputError("field and surface dimensions differ")
        chart = self

        def mu_plus(y):
            return chart.lifted_coefficients(field, y)[0]

        def mu_minus(y):
            return chart.lifted_coefficients(field, y)[1]

        def sigma(y):
            return chart.lifted_coefficients(field, y)[2]

        project = None
        if field.project is not None:

            def project(y):
                y = np.asarray(y, dtype=float)
                return chart.to_lifted(field.project(chart.to_original(y))).reshape(y.shape)

        zero = tuple(k for k in field.zero_drift if k != 0)
        return CoefficientField(
            dim=self.dim,
            drift_plus=mu_plus,
            drift_minus=mu_minus,
            diffusion=sigma,
            boundary="plus",
            switch=None,
            noise_columns=field.noise_columns,
            zero_drift=zero,
            project=project,
            joint=lambda y: chart.lifted_joint(field, y),
            name=f"{field.name} (lifted)",
            params=dict(field.params),
        )


def flatten(field: CoefficientField, tol: float = 1e-12) -> tuple[CoefficientField, SurfaceChart | None]:
    """Return a field discontinuous across ``{x1 = 0}`` plus the chart used (if any)."""
    if field.switch is None:
        return field, None
    chart = SurfaceChart(field.switch, tol=tol)
    return chart.lift_coefficients(field), chart

