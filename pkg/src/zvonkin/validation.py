"""Grid-based numeric checks of the standing assumptions on a coefficient field.

None of these checks certifies a global property; each reports what was
measured on the sample grid it was given.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.optimize import nnls

from .errors import InputError
from .model import CoefficientField
from .surface import SurfaceChart

GROWTH_NOTE = "advisory: a finite grid cannot certify a global linear-growth bound"


@dataclass
class ValidationReport:
    """Outcome of one or more validators; unset fields stay ``None``."""

    ellipticity_floor: float | None = None
    ellipticity_c: float | None = None
    growth_constants: tuple[float, float] | None = None
    growth_excess: float | None = None
    transversality_floor: float | None = None
    transversality_c: float | None = None
    smoothness_flags: dict[str, bool] = dc_field(default_factory=dict)
    verdict: dict[str, bool] = dc_field(default_factory=dict)
    notes: list[str] = dc_field(default_factory=list)

    @property
    def passed(self) -> bool:
        """True when every binding verdict passed (growth is advisory)."""
        return all(v for k, v in self.verdict.items() if k != "growth")

    def merge(self, other: "ValidationReport") -> "ValidationReport":
        out = ValidationReport(**asdict(self))
        for name, value in asdict(other).items():
            if name == "smoothness_flags":
                out.smoothness_flags.update(value)
            elif name == "verdict":
                out.verdict.update(value)
            elif name == "notes":
                out.notes.extend(n for n in value if n not in out.notes)
            elif value is not None:
                setattr(out, name, value)
        return out

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["growth_constants"] is not None:
            out["growth_constants"] = list(out["growth_constants"])
        out["passed"] = self.passed
        return out


def _grid(field: CoefficientField, grid) -> np.ndarray:
    pts = np.asarray(grid, dtype=float)
    if pts.ndim == 1 and field.dim == 1:
        pts = pts[:, None]
    pts = field.points(pts)
    if pts.shape[0] == 0:
        raise InputError("grid must be nonempty")
    return pts


def validate_ellipticity(field: CoefficientField, grid, c: float) -> ValidationReport:
    """Minimum of ``(sigma sigma^T)_11`` over the grid; pass iff it is at least ``c``."""
    if not c > 0:
        raise InputError("ellipticity constant must be positive")
    pts = _grid(field, grid)
    floor = float(np.min(field.a11(pts)))
    return ValidationReport(ellipticity_floor=floor, ellipticity_c=float(c), verdict={"ellipticity": floor >= c})


def validate_growth(field: CoefficientField, grid) -> ValidationReport:
    """Fit ``|mu(x)| ~ D1 + D2 |x|`` (nonnegative least squares) and report the excess.

    The excess is the largest relative amount by which ``|mu(x)|`` exceeds the
    fitted line on the grid.  The verdict is advisory.
    """
    pts = _grid(field, grid)
    r = np.linalg.norm(pts, axis=1)
    y = np.linalg.norm(field.drift(pts), axis=1)
    (d1, d2), _ = nnls(np.column_stack([np.ones_like(r), r]), y)
    bound = d1 + d2 * r
    slack = 64.0 * np.finfo(float).eps * (np.abs(y) + bound)
    over = np.maximum(0.0, y - bound - slack)
    excess = float(np.max(over / np.maximum(bound, np.finfo(float).tiny)))
    return ValidationReport(
        growth_constants=(float(d1), float(d2)),
        growth_excess=excess,
        verdict={"growth": excess == 0.0},
        notes=[GROWTH_NOTE],
    )


# ----------------------------------------------------------------------
# smoothness
# ----------------------------------------------------------------------
_STENCILS = {
    1: ((-1, -0.5), (1, 0.5)),
    2: ((-1, 1.0), (0, -2.0), (1, 1.0)),
    3: ((-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)),
}


def _mixed_partial(fn, pts: np.ndarray, alpha: tuple[int, ...], h: np.ndarray) -> np.ndarray:
    """Tensor-product central difference of ``fn`` (values ``(n, m)``) for multi-index alpha."""
    axes = [(i, k) for i, k in enumerate(alpha) if k > 0]
    total = None
    for combo in itertools.product(*(_STENCILS[k] for _, k in axes)):
        shift = np.zeros_like(pts)
        weight = 1.0
        for (i, _), (off, w) in zip(axes, combo):
            shift[:, i] += off * h
            weight *= w
        val = weight * fn(pts + shift)
        total = val if total is None else total + val
    order = sum(alpha)
    return total / h[:, None] ** order


def probe_smoothness(field: CoefficientField, half: str, order: int, grid, rel_step: float = 1e-3) -> dict[str, bool]:
    """Step-halving stability of finite-difference partials of one half-field.

    Partials ``d^alpha`` with ``1 <= |alpha| <= order`` and ``alpha_1 <= 1``
    are estimated by central differences at steps ``h`` and ``h/2``.  A
    coefficient is flagged (``False``) when at some grid point the two
    estimates differ by more than half of the coarse one, i.e. the ratio
    test ``|D(h/2)/D(h) - 1| < 0.5`` fails.  Estimates below a noise floor
    are compared against that floor instead.

    Returns a mapping ``{"mu1": bool, ..., "sigma11": bool, ...}``.
    """
    if order not in (1, 2, 3):
        raise InputError("order must be 1, 2 or 3")
    pts = _grid(field, grid)
    drift = field.half(half)
    d = field.dim

    def values(x):
        mu = np.asarray(drift(x), dtype=float).reshape(-1, d)
        sig = field.sigma(x).reshape(-1, d * d)
        return np.concatenate([mu, sig], axis=1)

    names = [f"mu{k + 1}" for k in range(d)] + [f"sigma{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    base = np.abs(values(pts))
    flags = np.ones(len(names), dtype=bool)
    h = rel_step * (1.0 + np.linalg.norm(pts, axis=1))
    for alpha in itertools.product(range(order + 1), repeat=d):
        n_alpha = sum(alpha)
        if n_alpha == 0 or n_alpha > order or alpha[0] > 1:
            continue
        coarse = _mixed_partial(values, pts, alpha, h)
        fine = _mixed_partial(values, pts, alpha, 0.5 * h)
        noise = 1e3 * np.finfo(float).eps * (1.0 + base.max(axis=0)) / (0.5 * h[:, None]) ** n_alpha
        floor = np.maximum(1e-3 * np.max(np.abs(coarse), axis=0), noise)
        ok = np.abs(fine - coarse) < 0.5 * np.maximum(np.abs(coarse), floor)
        flags &= ok.all(axis=0)
    return {name: bool(flag) for name, flag in zip(names, flags)}


def validate_smoothness(field: CoefficientField, grid, order: int = 3) -> ValidationReport:
    """Run :func:`probe_smoothness` on both halves; grid points on the hyperplane are skipped."""
    pts = _grid(field, grid)
    pts = pts[field.side(pts) != 0.0]
    flags: dict[str, bool] = {}
    for half in ("plus", "minus"):
        for name, ok in probe_smoothness(field, half, order, pts).items():
            key = name if name.startswith("sigma") else f"{name}_{half}"
            flags[key] = flags.get(key, True) and ok
    return ValidationReport(smoothness_flags=flags, verdict={"smoothness": all(flags.values())})


def validate_transversality(chart: SurfaceChart, field: CoefficientField, grid, c: float) -> ValidationReport:
    """Minimum of ``|grad f(x) . sigma(x)|^2`` over the grid; pass iff at least ``c``."""
    if not c > 0:
        raise InputError("transversality constant must be positive")
    pts = _grid(field, grid)
    row = np.einsum("ni,nij->nj", chart.surface.grad(pts), field.sigma(pts))
    floor = float(np.min(np.einsum("nj,nj->n", row, row)))
    return ValidationReport(transversality_floor=floor, transversality_c=float(c), verdict={"transversality": floor >= c})


# ----------------------------------------------------------------------
def box_grid(center, half_width: float, n_per_dim: int) -> np.ndarray:
    """Regular tensor grid on the cube ``center +- half_width``."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    axes = [np.linspace(c - half_width, c + half_width, n_per_dim) for c in center]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def multiscale_grid(dim: int, scales=(0.5, 1.0, 2.0, 4.0, 8.0, 16.0), n_dirs: int = 16, seed: int = 0) -> np.ndarray:
    """Points on spheres of several radii (for growth fits)."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_dirs, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.concatenate([s * dirs for s in scales], axis=0)
