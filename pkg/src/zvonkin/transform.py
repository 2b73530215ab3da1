"""The drift-removing change of variables ``G`` and its inverse ``H``.

For a field whose drift jumps across ``{x1 = 0}`` and whose diffusion
satisfies ``a = (sigma sigma^T)_11 > 0`` put, along each line ``x_rest = const``,

    I(x1)   = int_0^x1 2 mu_1 / a dt                       (inner exponent)
    g1(x1)  = int_0^x1 exp(-I(xi)) dxi
    C_k(xi) = -int_0^xi (2 mu_k / a)(eta) exp(I(eta)) deta     (k >= 2)
    g_k(x1) = int_0^x1 C_k(xi) exp(-I(xi)) dxi

and ``G(x) = (g1(x), x2 + g2(x), ..., xd + gd(x))``.  Then
``mu_1 g1' + a/2 g1'' = 0`` and ``mu_k + mu_1 gk' + a/2 gk'' = 0``, so the
Ito drift of ``Z = G(X)`` is continuous across the hyperplane.

Numerically the integrals are tabulated on a product lattice: nodes
``k * delta`` along ``x1`` (split at 0, integrated outward with a fourth-order
corrected trapezoid rule) and nodes ``j * h_rest`` across ``x_rest``.  Between
nodes the table is interpolated (see :mod:`zvonkin._kernels`).  Second
derivatives in ``x1`` are never interpolated: they are recomputed from the
ODEs at the evaluation point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .errors import (
    ChartBuildError,
    ChartExitError,
    InputError,
    InversionError,
    TransformBuildError,
)
from .model import FD_STEP, CoefficientField
from .quadrature import cumulative_hermite, richardson_gap
from .surface import SurfaceChart, flatten


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances of transform construction and inversion.

    Attributes
    ----------
    quadrature:
        Target error of the tabulated integrals, in the mixed sense
        ``|error| <= quadrature * (1 + |value|)``.
    newton, newton_max_iter:
        Stopping rule ``|G(x) - z| <= newton * max(1, |z|)`` and iteration cap.
    delta_inv:
        Smallest admissible singular value of ``grad G`` inside a chart.
    shrink:
        Geometric factor for shrinking the chart radius during certification.
    shell_points_per_dim:
        Certification shell size is ``shell_points_per_dim * d``.
    surface:
        Newton tolerance of the surface inverse ``e``.
    """

    quadrature: float = 1e-10
    newton: float = 1e-12
    newton_max_iter: int = 50
    delta_inv: float = 1e-3
    shrink: float = 0.7
    shell_points_per_dim: int = 32
    surface: float = 1e-12
    max_halvings: int = 6
    max_shrinks: int = 60
    table_budget: int = 50_000_000

    def __post_init__(self):
        for name in ("quadrature", "newton", "delta_inv", "surface"):
            if not getattr(self, name) > 0:
                raise InputError(f"tolerance {name} must be positive")
        if not 0 < self.shrink < 1:
            raise InputError("shrink factor must lie in (0, 1)")
        if self.newton_max_iter < 1:
            raise InputError("newton_max_iter must be >= 1")


def default_delta(tol: float) -> float:
    """Initial node spacing along ``x1`` for a quadrature tolerance."""
    return min(0.05, 0.8 * tol**0.25)


def default_h_rest(tol: float) -> float:
    """Lattice spacing across ``x_rest``.

    Six-point interpolation has error ``~ C h^6``; the factor 0.4 absorbs the
    constant (``C ~ 20`` for rational coefficients such as the dividend
    model's ``1/a11``) so the interpolation error stays below ``tol``.
    """
    return min(0.1, 0.4 * tol ** (1.0 / 6.0))


def _components(field: CoefficientField) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Nontrivial components of G and the indices k >= 2 (0-based >= 1) needing C_k."""
    zero = set(field.zero_drift)
    ks = tuple(k for k in range(1, field.dim) if k not in zero)
    g = ((0,) if 0 not in zero else ()) + ks
    return g, ks


# ----------------------------------------------------------------------
# line integration
# ----------------------------------------------------------------------
def _rho(field: CoefficientField, half: str, pts: np.ndarray, ks: tuple[int, ...]):
    """``2 mu_k / a`` for k in (0,) + ks and its x1-derivative at points."""
    idx = [0, *ks]
    mu = np.asarray(field.half(half)(pts), dtype=float).reshape(pts.shape)[:, idx]
    sig = field.sigma(pts)
    a = np.einsum("nj,nj->n", sig[:, 0, :], sig[:, 0, :])
    if not np.all(np.isfinite(a)) or np.any(a <= 0.0):
        bad = pts[np.argmin(np.where(np.isfinite(a), a, -np.inf))]
        raise TransformBuildError(f"(sigma sigma^T)_11 is not positive near {bad}")
    rho = 2.0 * mu / a[:, None]
    jac_given = (field.drift_plus_jac if half == "plus" else field.drift_minus_jac) is not None
    if jac_given and field.diffusion_jac is not None:
        dmu = field.drift_jacobian(half, pts)[:, idx, 0]
        dsig = field.diffusion_jacobian(pts)[:, 0, :, 0]
        da = 2.0 * np.einsum("nj,nj->n", sig[:, 0, :], dsig)
        drho = 2.0 * (dmu * a[:, None] - mu * da[:, None]) / (a * a)[:, None]
    else:
        h = FD_STEP * (1.0 + np.linalg.norm(pts, axis=1))
        shift = np.zeros_like(pts)
        shift[:, 0] = h
        rp = _rho_plain(field, half, pts + shift, idx)
        rm = _rho_plain(field, half, pts - shift, idx)
        drho = (rp - rm) / (2.0 * h)[:, None]
    return rho, drho


def _rho_plain(field, half, pts, idx):
    mu = np.asarray(field.half(half)(pts), dtype=float).reshape(pts.shape)[:, idx]
    a = field.a11(pts)
    return 2.0 * mu / a[:, None]


def _integrate_lines(field, plus, rest, step, n_nodes, ks):
    """Integrate the defining ODE data along lines starting at ``x1 = 0``.

    Parameters
    ----------
    plus: (L,) bool
        Which drift half to use on each line.
    rest: (L, d-1)
        Fixed coordinates of each line.
    step: (L,)
        Signed node spacing of each line.

    Returns ``(val, d1, d2)`` of shape ``(L, n_nodes, C)`` with components
    ordered ``[g1, g_k for k in ks, I, C_k for k in ks]`` (``g1`` always
    included here; callers drop it when ``mu_1`` vanishes identically).
    """
    L = rest.shape[0]
    d = field.dim
    nk = len(ks)
    xi = step[:, None] * np.arange(n_nodes)[None, :]
    pts = np.empty((L, n_nodes, d))
    pts[..., 0] = xi
    pts[..., 1:] = rest[:, None, :]
    flat = pts.reshape(-1, d)
    rho = np.empty((L * n_nodes, 1 + nk))
    drho = np.empty_like(rho)
    rows = np.repeat(np.asarray(plus, dtype=bool), n_nodes)
    for half, sel in (("plus", rows), ("minus", ~rows)):
        if np.any(sel):
            rho[sel], drho[sel] = _rho(field, half, flat[sel], ks)
    rho = rho.reshape(L, n_nodes, 1 + nk)
    drho = drho.reshape(L, n_nodes, 1 + nk)
    r1, dr1 = rho[..., 0], drho[..., 0]

    C = 2 + 2 * nk
    val = np.empty((L, n_nodes, C))
    d1 = np.empty_like(val)
    d2 = np.empty_like(val)
    inner = cumulative_hermite(r1, dr1, step)
    with np.errstate(over="ignore"):
        em = np.exp(-inner)
        ep = np.exp(inner)
    val[..., 0] = cumulative_hermite(em, -r1 * em, step)
    d1[..., 0] = em
    d2[..., 0] = -r1 * em
    ci = 1 + nk
    val[..., ci] = inner
    d1[..., ci] = r1
    d2[..., ci] = dr1
    for m in range(nk):
        rk, drk = rho[..., 1 + m], drho[..., 1 + m]
        f = -rk * ep
        df = -(drk + rk * r1) * ep
        ck = cumulative_hermite(f, df, step)
        gprime = ck * em
        val[..., 1 + m] = cumulative_hermite(gprime, -rk - r1 * gprime, step)
        d1[..., 1 + m] = gprime
        d2[..., 1 + m] = -rk - r1 * gprime
        val[..., ci + 1 + m] = ck
        d1[..., ci + 1 + m] = f
        d2[..., ci + 1 + m] = df
    if not (np.all(np.isfinite(val)) and np.all(np.isfinite(d1))):
        raise TransformBuildError("transform integrals overflowed; reduce the chart region")
    return val, d1, d2


def _assemble(field, rest, delta, k_lo, k_hi, ks):
    """Two-sided line data on nodes ``k_lo..k_hi`` (``k_lo <= -1``, ``k_hi >= 1``)."""
    L = rest.shape[0]
    ones = np.ones(L)
    pv, p1, p2 = _integrate_lines(field, np.ones(L, bool), rest, delta * ones, k_hi + 1, ks)
    mv, m1, m2 = _integrate_lines(field, np.zeros(L, bool), rest, -delta * ones, 1 - k_lo, ks)
    pos0 = -k_lo
    shape = (L, k_hi - k_lo + 1, pv.shape[2])
    val, d1, d2p, d2m = (np.empty(shape) for _ in range(4))
    for out, minus, plus_ in ((val, mv, pv), (d1, m1, p1)):
        out[:, : pos0 + 1] = minus[:, ::-1]
        out[:, pos0:] = plus_
    d2p[:, :pos0] = m2[:, :0:-1]
    d2p[:, pos0:] = p2
    d2m[:, : pos0 + 1] = m2[:, ::-1]
    d2m[:, pos0 + 1 :] = p2[:, 1:]
    return val, d1, d2p, d2m


class TableValues(NamedTuple):
    """Interpolated component data: values, d/dx1, d/dx_rest, d2/dx1 dx_rest, d2/dx_rest^2."""

    g: np.ndarray
    g1: np.ndarray
    gr: np.ndarray
    g1r: np.ndarray
    grr: np.ndarray


class TableRangeError(ChartExitError):
    """A point lies outside the tabulated region."""


class TransformTable:
    """Tabulated transform data on a lattice box; immutable once built.

    Use :meth:`build` to construct and :meth:`extend` to obtain a table
    covering a larger box (node values at shared lattice points are
    identical, so results do not depend on the extension history).
    """

    def __init__(self, field, delta, h_rest, k_lo, j_lo, n_rest, val, d1, d2p, d2m, tol, halvings=0):
        self.field = field
        self.dim = field.dim
        self.g_comps, self.k_comps = _components(field)
        self.delta = float(delta)
        self.h_rest = float(h_rest)
        self.k_lo = int(k_lo)
        self.j_lo = np.asarray(j_lo, dtype=np.int64).reshape(field.dim - 1)
        self.n_rest = np.asarray(n_rest, dtype=np.int64).reshape(field.dim - 1)
        self.val, self.d1, self.d2p, self.d2m = (np.ascontiguousarray(a) for a in (val, d1, d2p, d2m))
        self.tol = float(tol)
        self.halvings = int(halvings)
        self._comps_arr = np.asarray(self.g_comps, dtype=np.int64)
        self.packed = np.ascontiguousarray(np.stack([self.val, self.d1, self.d2p, self.d2m], axis=-1).transpose(1, 0, 2, 3))
        for arr in (self.val, self.d1, self.d2p, self.d2m, self.packed):
            arr.flags.writeable = False

    # -- construction -----------------------------------------------------
    @staticmethod
    def _lattice(lo, hi, delta, h_rest):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        k_lo = min(-1, int(math.floor(lo[0] / delta)))
        k_hi = max(1, int(math.ceil(hi[0] / delta)))
        half = K.STENCIL // 2 - 1
        j_lo = np.floor(lo[1:] / h_rest).astype(np.int64) - half
        j_hi = np.floor(hi[1:] / h_rest).astype(np.int64) + K.STENCIL - half - 1
        return k_lo, k_hi, j_lo, j_hi - j_lo + 1

    @staticmethod
    def _rest_points(j_lo, n_rest, h_rest):
        if j_lo.size == 0:
            return np.zeros((1, 0))
        axes = [(j0 + np.arange(n)) * h_rest for j0, n in zip(j_lo, n_rest)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @classmethod
    def build(
        cls,
        field: CoefficientField,
        lo,
        hi,
        tol: float = 1e-10,
        delta: float | None = None,
        h_rest: float | None = None,
        check: bool = True,
        max_halvings: int = 6,
        budget: int = 50_000_000,
    ) -> "TransformTable":
        """Tabulate the transform on a box containing ``[lo, hi]``.

        With ``check`` the node spacing is verified by step halving: the
        table at spacing ``delta`` is accepted when it agrees with the table
        at ``delta/2`` to within ``tol * (1 + |value|)``; otherwise ``delta``
        is halved (at most ``max_halvings`` times, then
        :class:`TransformBuildError`).
        """
        if field.switch is not None:
            raise InputError("tables are built for hyperplane fields; lift the field first")
        if not tol > 0:
            raise InputError("quadrature tolerance must be positive")
        delta = default_delta(tol) if delta is None else float(delta)
        h_rest = default_h_rest(tol) if h_rest is None else float(h_rest)
        g_comps, ks = _components(field)
        if not g_comps:
            z = np.zeros((0, 2, 0))
            dr = field.dim - 1
            return cls(field, delta, h_rest, -1, np.zeros(dr), np.zeros(dr), z, z, z, z, tol)
        for halving in range(max_halvings + 1):
            k_lo, k_hi, j_lo, n_rest = cls._lattice(lo, hi, delta, h_rest)
            rest = cls._rest_points(j_lo, n_rest, h_rest)
            n_lines, n_nodes = rest.shape[0], k_hi - k_lo + 1
            if n_lines * n_nodes * (2 + 2 * len(ks)) > budget:
                raise ChartBuildError(
                    f"transform table for box {np.round(lo, 3).tolist()}..{np.round(hi, 3).tolist()} "
                    f"exceeds the size budget ({n_lines} lines x {n_nodes} nodes)"
                )
            coarse = _assemble(field, rest, delta, k_lo, k_hi, ks)
            if not check:
                break
            fine = _assemble(field, rest, 0.5 * delta, 2 * k_lo, 2 * k_hi, ks)
            gap = richardson_gap(np.moveaxis(coarse[0], 1, -1), np.moveaxis(fine[0], 1, -1))
            if gap <= tol:
                break
            delta *= 0.5
        else:
            raise TransformBuildError(
                f"quadrature did not reach tolerance {tol:g} after {max_halvings} step halvings (gap {gap:.3g})"
            )
        val, d1, d2p, d2m = coarse
        if 0 not in g_comps:  # mu_1 == 0: g1(x) = x1 is not tabulated
            val, d1, d2p, d2m = (a[..., 1:] for a in (val, d1, d2p, d2m))
        return cls(field, delta, h_rest, k_lo, j_lo, n_rest, val, d1, d2p, d2m, tol, halvings=halving if check else 0)

    # -- geometry ---------------------------------------------------------
    @property
    def trivial(self) -> bool:
        """True when G is the identity (drift vanishes identically)."""
        return not self.g_comps

    @property
    def n_aux(self) -> int:
        return self.val.shape[2] - len(self.g_comps)

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate box on which every point can be evaluated."""
        if self.trivial:
            return np.full(self.dim, -np.inf), np.full(self.dim, np.inf)
        n_nodes = self.val.shape[1]
        half = K.STENCIL // 2 - 1
        lo = np.empty(self.dim)
        hi = np.empty(self.dim)
        lo[0] = self.k_lo * self.delta
        hi[0] = (self.k_lo + n_nodes - 1) * self.delta
        lo[1:] = (self.j_lo + half) * self.h_rest
        hi[1:] = (self.j_lo + self.n_rest - (K.STENCIL - half)) * self.h_rest
        return lo, hi

    def covers(self, lo, hi) -> bool:
        if self.trivial:
            return True
        blo, bhi = self.box()
        return bool(np.all(np.asarray(lo) >= blo) and np.all(np.asarray(hi) < bhi))

    def extend(self, lo, hi, margin: float = 0.25) -> "TransformTable":
        """Table with the same spacings covering the current box and ``[lo, hi]``."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if self.covers(lo, hi):
            return self
        pad = margin * (hi - lo) + 4.0 * max(self.delta, self.h_rest)
        blo, bhi = self.box()
        new_lo = np.minimum(blo, lo - pad)
        new_hi = np.maximum(bhi - 1e-9, hi + pad)
        return TransformTable.build(
            self.field, new_lo, new_hi, self.tol, delta=self.delta, h_rest=self.h_rest, check=False
        )

    # -- evaluation -------------------------------------------------------
    def evaluate(self, points, want: int = 2, aux: bool = False) -> TableValues:
        """Interpolated component data at ``(n, d)`` points.

        Components are ``g_comps`` (and the auxiliary ``I``, ``C_k`` when
        ``aux``).  Raises :class:`TableRangeError` outside the table.
        """
        pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, self.dim))
        ncomp = self.val.shape[2] if aux else len(self.g_comps)
        dr = self.dim - 1
        if self.trivial:
            n = pts.shape[0]
            return TableValues(
                np.zeros((n, ncomp)), np.zeros((n, ncomp)), np.zeros((n, ncomp, dr)),
                np.zeros((n, ncomp, dr)), np.zeros((n, ncomp, dr, dr)),
            )
        ok, g, g1, gr, g1r, grr = K.eval_table(
            pts, ncomp, self.packed, self.k_lo, self.delta,
            self.j_lo, self.n_rest, self.h_rest, K.LAGRANGE, int(want),
        )
        if not ok.all():
            bad = pts[np.argmin(ok)]
            raise TableRangeError(f"point {bad} lies outside the tabulated region")
        return TableValues(g, g1, gr, g1r, grr)

    def map_and_jacobian(self, points) -> tuple[np.ndarray, np.ndarray]:
        """``G(x)`` and ``grad G(x)`` at points."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        tv = self.evaluate(pts, want=1)
        gmap = pts.copy()
        jac = np.broadcast_to(np.eye(self.dim), (pts.shape[0], self.dim, self.dim)).copy()
        for c, k in enumerate(self.g_comps):
            if k == 0:
                gmap[:, 0] = tv.g[:, c]
                jac[:, 0, 0] = tv.g1[:, c]
            else:
                gmap[:, k] += tv.g[:, c]
                jac[:, k, 0] += tv.g1[:, c]
            jac[:, k, 1:] += tv.gr[:, c, :]
        return gmap, jac

    def invert(self, z, x_init, centers, radii, tol: float, max_iter: int):
        """Damped Newton solve of ``G(x) = z`` row by row inside balls.

        Returns ``(x, status, iterations)`` with status codes from
        :mod:`zvonkin._kernels` (0 ok, 1 not converged, 2 left the table).
        """
        z = np.ascontiguousarray(np.asarray(z, dtype=float).reshape(-1, self.dim))
        if self.trivial:
            return z.copy(), np.zeros(z.shape[0], np.int64), np.zeros(z.shape[0], np.int64)
        n = z.shape[0]
        x_init = np.ascontiguousarray(np.broadcast_to(np.asarray(x_init, dtype=float), (n, self.dim)))
        centers = np.ascontiguousarray(np.broadcast_to(np.asarray(centers, dtype=float), (n, self.dim)))
        radii = np.ascontiguousarray(np.broadcast_to(np.asarray(radii, dtype=float), (n,)))
        return K.invert_table(
            z, x_init, centers, radii, self._comps_arr, self.packed,
            self.k_lo, self.delta, self.j_lo, self.n_rest, self.h_rest, K.LAGRANGE, float(tol), int(max_iter),
        )

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        n_nodes = self.val.shape[1]
        return {
            "delta": self.delta,
            "h_rest": self.h_rest,
            "k_lo": self.k_lo,
            "n_nodes": int(n_nodes),
            "j_lo": self.j_lo.tolist(),
            "n_rest": self.n_rest.tolist(),
            "tol": self.tol,
            "halvings": self.halvings,
            "components": list(self.g_comps),
            "xi": ((self.k_lo + np.arange(n_nodes)) * self.delta).tolist(),
            "rest": self._rest_points(self.j_lo, self.n_rest, self.h_rest).tolist() if not self.trivial else [],
            "val": self.val.tolist(),
            "d1": self.d1.tolist(),
            "d2p": self.d2p.tolist(),
            "d2m": self.d2m.tolist(),
        }

    @classmethod
    def from_dict(cls, field: CoefficientField, data: dict) -> "TransformTable":
        g_comps, _ = _components(field)
        if list(g_comps) != list(data["components"]):
            raise InputError("stored table does not match the supplied field's drift structure")

        def arr(name):
            a = np.asarray(data[name], dtype=float)
            return a if a.size else np.zeros((0, 2, 0))

        return cls(
            field, data["delta"], data["h_rest"], data["k_lo"], data["j_lo"], data["n_rest"],
            arr("val"), arr("d1"), arr("d2p"), arr("d2m"), data["tol"], data.get("halvings", 0),
        )


# ----------------------------------------------------------------------
# transformed coefficients
# ----------------------------------------------------------------------
def _half_drift(field: CoefficientField, x: np.ndarray) -> np.ndarray:
    """Drift with the plus half on ``x1 >= 0`` and the minus half on ``x1 < 0``."""
    if field.boundary == "plus" and field.switch is None:
        return field.drift(x)
    mu = np.empty_like(x)
    plus = x[:, 0] >= 0.0
    if np.any(plus):
        mu[plus] = np.asarray(field.drift_plus(x[plus]), dtype=float).reshape(-1, field.dim)
    if not np.all(plus):
        mu[~plus] = np.asarray(field.drift_minus(x[~plus]), dtype=float).reshape(-1, field.dim)
    return mu


def derivatives(table: TransformTable, x: np.ndarray, mu=None, sig=None):
    """``(G, grad G, hess G)`` at points; hessians ``(n, d, d, d)`` indexed ``[n, k, i, j]``.

    The ``x1 x1`` second derivatives come from the defining ODEs with the
    drift half selected by the sign of ``x1`` (plus side at ``x1 = 0``).
    """
    field = table.field
    d = field.dim
    x = np.asarray(x, dtype=float).reshape(-1, d)
    n = x.shape[0]
    mu = _half_drift(field, x) if mu is None else mu
    sig = field.sigma(x) if sig is None else sig
    a = np.einsum("nj,nj->n", sig[:, 0, :], sig[:, 0, :])
    tv = table.evaluate(x, want=2)
    gmap = x.copy()
    jac = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    hess = np.zeros((n, d, d, d))
    rho1 = 2.0 * mu[:, 0] / a
    for c, k in enumerate(table.g_comps):
        if k == 0:
            gmap[:, 0] = tv.g[:, c]
            jac[:, 0, 0] = tv.g1[:, c]
            hess[:, 0, 0, 0] = -rho1 * tv.g1[:, c]
        else:
            gmap[:, k] += tv.g[:, c]
            jac[:, k, 0] += tv.g1[:, c]
            hess[:, k, 0, 0] = -2.0 * mu[:, k] / a - rho1 * tv.g1[:, c]
        jac[:, k, 1:] += tv.gr[:, c, :]
        hess[:, k, 0, 1:] = tv.g1r[:, c, :]
        hess[:, k, 1:, 0] = tv.g1r[:, c, :]
        hess[:, k, 1:, 1:] = tv.grr[:, c, :, :]
    return gmap, jac, hess


def coefficients_at(table: TransformTable, x, mu=None, sig=None, with_jacobian: bool = False):
    """Transformed drift and diffusion expressed at preimage points ``x``.

    ``mu~_k = grad G_k . mu + 1/2 tr(sigma^T hess G_k sigma)`` and
    ``sigma~ = grad G sigma``.  With ``with_jacobian`` the tuple also holds
    ``grad G`` at ``x``.
    """
    field = table.field
    x = np.asarray(x, dtype=float).reshape(-1, field.dim)
    if mu is None and sig is None and field.boundary == "plus" and field.switch is None:
        mu, sig = field.coefficients(x)
    mu = _half_drift(field, x) if mu is None else mu
    sig = field.sigma(x) if sig is None else sig
    _, jac, hess = derivatives(table, x, mu, sig)
    amat = sig @ np.transpose(sig, (0, 2, 1))
    drift = np.einsum("nki,ni->nk", jac, mu) + 0.5 * np.einsum("nkij,nij->nk", hess, amat)
    if with_jacobian:
        return drift, jac @ sig, jac
    return drift, jac @ sig


# ----------------------------------------------------------------------
# certification
# ----------------------------------------------------------------------
def shell_points(center, radius: float, per_dim: int = 32) -> np.ndarray:
    """Deterministic sample of the ball: the center and three concentric shells."""
    center = np.asarray(center, dtype=float)
    d = center.size
    m = per_dim * d
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
    elif d == 2:
        ang = 2.0 * np.pi * np.arange(m) / m
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        dirs = np.random.default_rng(0).standard_normal((m, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    shells = [center + f * radius * dirs for f in (1.0, 2.0 / 3.0, 1.0 / 3.0)]
    return np.concatenate([center[None, :], *shells], axis=0)


def min_singular_values(jac: np.ndarray) -> np.ndarray:
    """Smallest singular value per matrix; non-finite matrices count as 0."""
    finite = np.all(np.isfinite(jac), axis=(1, 2))
    out = np.zeros(jac.shape[0])
    if np.any(finite):
        out[finite] = np.linalg.svd(jac[finite], compute_uv=False)[:, -1]
    return out


def direct_jacobian(field: CoefficientField, points, delta: float, max_nodes: int = 4000) -> np.ndarray:
    """``grad G`` at points by integrating each line from 0 (no table).

    Used to certify radii before a table exists: the cost does not depend
    on the size of the region.  ``x_rest`` partials use central differences
    with step ``1e-4 (1 + |x|)``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, field.dim)
    n, d = pts.shape
    g_comps, ks = _components(field)
    jac = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    if not g_comps:
        return jac
    span = float(np.max(np.abs(pts[:, 0])))
    m = int(min(max_nodes, max(64, math.ceil(span / delta))))
    h = 1e-4 * (1.0 + np.linalg.norm(pts, axis=1))
    variants = [pts[:, 1:]]
    for i in range(d - 1):
        e = np.zeros(d - 1)
        e[i] = 1.0
        variants += [pts[:, 1:] + h[:, None] * e, pts[:, 1:] - h[:, None] * e]
    rest = np.concatenate(variants, axis=0)
    x1 = np.tile(pts[:, 0], len(variants))
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            val, d1, _ = _integrate_lines(field, x1 >= 0.0, rest, x1 / m, m + 1, ks)
        except TransformBuildError:
            return np.full((n, d, d), np.nan)
    end_val = val[:, -1, :].reshape(len(variants), n, -1)
    end_d1 = d1[:, -1, :].reshape(len(variants), n, -1)
    full = [0, *range(1, 1 + len(ks))]  # columns of g1 and g_k in line data
    for c_line, k in zip(full, (0, *ks)):
        if k not in g_comps:
            continue
        jac[:, k, 0] = end_d1[0, :, c_line]
        for i in range(d - 1):
            jac[:, k, 1 + i] += (end_val[1 + 2 * i, :, c_line] - end_val[2 + 2 * i, :, c_line]) / (2.0 * h)
    return jac


def certify(jacobian_fn, center, radius: float, tols: Tolerances) -> tuple[bool, float]:
    """Check ``sigma_min(grad G) >= delta_inv`` on the shell sample of a ball."""
    pts = shell_points(center, radius, tols.shell_points_per_dim)
    smin = min_singular_values(jacobian_fn(pts))
    worst = float(np.min(smin))
    return worst >= tols.delta_inv, worst


# ----------------------------------------------------------------------
# charts
# ----------------------------------------------------------------------
class TransformChart:
    """A certified ball on which ``G`` is invertible, with its tabulated data.

    For a field whose discontinuity is a surface ``{f = 0}`` the chart lives
    in the lifted coordinates ``(u, x_rest)`` with ``u = f(x)``; use
    :meth:`from_original` / :meth:`to_original` to convert.
    """

    def __init__(
        self,
        field: CoefficientField,
        center,
        radius: float,
        table: TransformTable,
        tolerances: Tolerances,
        surface_chart: SurfaceChart | None = None,
        original_field: CoefficientField | None = None,
        min_singular: float | None = None,
    ):
        self.field = field
        self.center = np.asarray(center, dtype=float).reshape(field.dim)
        self.radius = float(radius)
        self.table = table
        self.tolerances = tolerances
        self.surface_chart = surface_chart
        self.original_field = original_field if original_field is not None else field
        self.min_singular = min_singular
        self.center.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.field.dim

    # -- coordinates ------------------------------------------------------
    def from_original(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.surface_chart is None:
            return x.reshape(-1, self.dim).copy()
        return self.surface_chart.to_lifted(x)

    def to_original(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.surface_chart is None:
            return y.reshape(-1, self.dim).copy()
        return self.surface_chart.to_original(y)

    def contains(self, x, slack: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        return np.linalg.norm(x - self.center, axis=1) <= self.radius * (1.0 + slack)

    def _inside(self, x) -> np.ndarray:
        pts = np.asarray(x, dtype=float).reshape(-1, self.dim)
        if not np.all(self.contains(pts)):
            bad = pts[np.argmin(self.contains(pts))]
            raise ChartExitError(f"point {bad} is outside the chart ball (center {self.center}, radius {self.radius})")
        return pts

    # -- component access ---------------------------------------------------
    def _aux_index(self, name: str, k: int = 0) -> int | None:
        ng = len(self.table.g_comps)
        if name == "I":
            return ng
        if k not in self.table.k_comps:
            return None
        return ng + 1 + self.table.k_comps.index(k)

    def _line_points(self, x1, x_rest) -> np.ndarray:
        x1 = np.atleast_1d(np.asarray(x1, dtype=float)).ravel()
        rest = np.asarray(x_rest, dtype=float).reshape(-1, self.dim - 1) if self.dim > 1 else np.zeros((1, 0))
        n = max(x1.size, rest.shape[0])
        pts = np.empty((n, self.dim))
        pts[:, 0] = np.broadcast_to(x1, (n,))
        pts[:, 1:] = np.broadcast_to(rest, (n, self.dim - 1))
        return pts

    def inner_exponent(self, x1, x_rest=()) -> np.ndarray:
        pts = self._inside(self._line_points(x1, x_rest))
        if self.table.trivial:
            return np.zeros(pts.shape[0])
        return self.table.evaluate(pts, want=0, aux=True).g[:, self._aux_index("I")]

    def ck(self, k: int, xi, x_rest=()) -> np.ndarray:
        """``C_k`` for ``k = 2..d`` (1-based as in ``G``'s definition)."""
        kk = self._component(k, low=2)
        pts = self._inside(self._line_points(xi, x_rest))
        col = self._aux_index("C", kk)
        if col is None:
            return np.zeros(pts.shape[0])
        return self.table.evaluate(pts, want=0, aux=True).g[:, col]

    def g(self, k: int, x) -> np.ndarray:
        """``g_k`` for ``k = 1..d`` (1-based)."""
        kk = self._component(k, low=1)
        pts = self._inside(x)
        if kk not in self.table.g_comps:
            return pts[:, 0].copy() if kk == 0 else np.zeros(pts.shape[0])
        return self.table.evaluate(pts, want=0).g[:, self.table.g_comps.index(kk)]

    def _component(self, k: int, low: int) -> int:
        if not low <= int(k) <= self.dim:
            raise InputError(f"component index must lie in {low}..{self.dim}")
        return int(k) - 1

    # -- the map --------------------------------------------------------------
    def apply_G(self, x) -> np.ndarray:
        pts = self._inside(x)
        return self.table.map_and_jacobian(pts)[0]

    def apply_H(self, z, x_init=None) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(-1, self.dim)
        init = z if x_init is None else x_init
        x, status, _ = self.table.invert(
            z, init, self.center, self.radius, self.tolerances.newton, self.tolerances.newton_max_iter
        )
        if np.any(status != K.OK):
            bad = int(np.argmax(status != K.OK))
            raise InversionError(f"Newton inversion failed for z={z[bad]} (status {int(status[bad])})")
        return x

    def grad_G(self, x) -> np.ndarray:
        return self.table.map_and_jacobian(self._inside(x))[1]

    def hess_G(self, k: int, x) -> np.ndarray:
        kk = self._component(k, low=1)
        return derivatives(self.table, self._inside(x))[2][:, kk]

    def coefficients_at(self, x) -> tuple[np.ndarray, np.ndarray]:
        return coefficients_at(self.table, self._inside(x))

    def transformed_coefficients(self, z) -> tuple[np.ndarray, np.ndarray]:
        return coefficients_at(self.table, self.apply_H(z))

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        t = self.tolerances
        return {
            "center": self.center.tolist(),
            "radius": self.radius,
            "min_singular": self.min_singular,
            "coordinates": "lifted" if self.surface_chart is not None else "original",
            "tolerances": {
                "quadrature": t.quadrature,
                "newton": t.newton,
                "newton_max_iter": t.newton_max_iter,
                "delta_inv": t.delta_inv,
                "shrink": t.shrink,
                "shell_points_per_dim": t.shell_points_per_dim,
                "surface": t.surface,
            },
            "table": self.table.to_dict(),
        }

    @classmethod
    def from_dict(cls, field: CoefficientField, data: dict) -> "TransformChart":
        """Rebuild a chart from :meth:`to_dict` output and the field it was built for."""
        tols = Tolerances(**data["tolerances"])
        flat, schart = flatten(field, tols.surface)
        table = TransformTable.from_dict(flat, data["table"])
        return cls(flat, data["center"], data["radius"], table, tols, schart, field, data.get("min_singular"))


def build_chart(
    field: CoefficientField,
    x0,
    r_hint: float = 1.0,
    tolerances: Tolerances | None = None,
    shrink: bool = True,
    table: TransformTable | None = None,
) -> TransformChart:
    """Build a certified chart around ``x0`` (original coordinates).

    The radius starts at ``r_hint`` and shrinks by ``tolerances.shrink`` until
    the smallest singular value of ``grad G`` on the shell sample is at least
    ``delta_inv``; with ``shrink=False`` only ``r_hint`` is tried.
    """
    tols = tolerances or Tolerances()
    if not r_hint > 0:
        raise InputError("radius hint must be positive")
    flat, schart = flatten(field, tols.surface)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (field.dim,):
        raise InputError(f"x0 must have dimension {field.dim}")
    center = schart.to_lifted(x0)[0] if schart is not None else x0.copy()
    delta = table.delta if table is not None else default_delta(tols.quadrature)

    radius = float(r_hint)
    worst = np.nan
    for _ in range(tols.max_shrinks):
        ok, worst = certify(lambda p: direct_jacobian(flat, p, delta), center, radius, tols)
        if ok:
            break
        if not shrink:
            raise ChartBuildError(
                f"radius {radius:g} not certified at {x0.tolist()}: min singular value {worst:.3g} < {tols.delta_inv:g}"
            )
        radius *= tols.shrink
    else:
        raise ChartBuildError(f"no certified radius found around {x0.tolist()} (last min singular value {worst:.3g})")

    lo, hi = center - 1.01 * radius, center + 1.01 * radius
    if table is None:
        table = TransformTable.build(
            flat, lo, hi, tols.quadrature, max_halvings=tols.max_halvings, budget=tols.table_budget
        )
    else:
        table = table.extend(lo, hi)
    ok_tab, worst_tab = certify(lambda p: table.map_and_jacobian(p)[1], center, radius, tols)
    if not ok_tab:
        raise ChartBuildError(f"tabulated gradient fails certification at radius {radius:g} ({worst_tab:.3g})")
    return TransformChart(flat, center, radius, table, tols, schart, field, min(worst, worst_tab))


# ----------------------------------------------------------------------
# functional interface
# ----------------------------------------------------------------------
def inner_exponent(chart: TransformChart, x1, x_rest=()):
    return chart.inner_exponent(x1, x_rest)


def g1(chart: TransformChart, x):
    return chart.g(1, x)


def ck(chart: TransformChart, k: int, xi, x_rest=()):
    return chart.ck(k, xi, x_rest)


def gk(chart: TransformChart, k: int, x):
    return chart.g(k, x)


def apply_G(chart: TransformChart, x):
    return chart.apply_G(x)


def apply_H(chart: TransformChart, z):
    return chart.apply_H(z)


def grad_G(chart: TransformChart, x):
    return chart.grad_G(x)


def hess_G(chart: TransformChart, k: int, x):
    return chart.hess_G(k, x)


def transformed_coefficients(chart: TransformChart, z):
    return chart.transformed_coefficients(z)
