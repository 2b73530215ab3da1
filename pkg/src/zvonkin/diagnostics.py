"""Measurable checks of the transform's defining identities and of simulated paths.

* :func:`ode_residual` -- how well the tabulated ``g_k`` solve their ODEs,
* :func:`roundtrip_error` -- ``|H(G(x)) - x|`` on a sample of the chart ball,
* :func:`drift_jump` -- size of the drift discontinuity before and after the transform,
* :func:`occupation_time`, :func:`local_time_estimate` -- path functionals
  near the discontinuity (and vectorised observers for large runs),
* :func:`projection_overshoot` -- how far the raw scheme leaves the state space
  that a projection (the dividend model's clamp) restores,
* :func:`compare_weak` -- the two simulation routes against each other.

Everything is collected in a :class:`DiagnosticsReport`, which serialises to
JSON and renders as a plain-text table.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import _kernels as K
from .engine import MonteCarloResult, PathEngine, SimConfig, Trajectory, monte_carlo
from .errors import EstimationError, InputError
from .model import CoefficientField
from .rng import derive_seed
from .transform import TransformChart, coefficients_at

#: offset of the one-sided evaluations at the discontinuity
JUMP_OFFSET = 1e-7
#: finite-difference step used on the chart's first-derivative evaluator
RESIDUAL_STEP = 1e-5
#: closest distance to {x1 = 0} at which ODE residuals are evaluated
RESIDUAL_EXCLUSION = 1e-6

UNIQUENESS_NOTE = (
    "pathwise uniqueness cannot be verified by a finite experiment; only the "
    "consistency of the two simulation routes is tested"
)
JUMP_NOTE = f"one-sided limits probed at offset {JUMP_OFFSET:g} from the discontinuity"


# ----------------------------------------------------------------------
# report
# ----------------------------------------------------------------------
@dataclass
class WeakComparison:
    """Direct versus transformed Monte Carlo estimates of ``E phi(X_T)``."""

    estimate_direct: float
    estimate_transformed: float
    combined_se: float
    z_score: float
    direct: MonteCarloResult | None = None
    transformed: MonteCarloResult | None = None
    matched_streams: bool = False

    def to_dict(self) -> dict:
        out = {
            "estimate_direct": self.estimate_direct,
            "estimate_transformed": self.estimate_transformed,
            "combined_se": self.combined_se,
            "z_score": self.z_score,
            "matched_streams": self.matched_streams,
        }
        if self.direct is not None:
            out["direct"] = self.direct.to_dict()
        if self.transformed is not None:
            out["transformed"] = self.transformed.to_dict()
        return out


@dataclass
class DiagnosticsReport:
    """Collected diagnostics; entries that were not computed stay ``None``/empty."""

    ode_residual_max: dict[str, float] = dc_field(default_factory=dict)
    roundtrip_max: float | None = None
    roundtrip_failures: int = 0
    drift_jump_original: float | None = None
    drift_jump_max: float | None = None
    occupation_fraction: dict[float, float] = dc_field(default_factory=dict)
    local_time_estimate: dict[float, float] = dc_field(default_factory=dict)
    local_time_se: dict[float, float] = dc_field(default_factory=dict)
    weak_comparison: WeakComparison | None = None
    checks: dict[str, bool] = dc_field(default_factory=dict)
    notes: list[str] = dc_field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "ode_residual_max": dict(sorted(self.ode_residual_max.items())),
            "roundtrip_max": self.roundtrip_max,
            "roundtrip_failures": self.roundtrip_failures,
            "drift_jump_original": self.drift_jump_original,
            "drift_jump_max": self.drift_jump_max,
            "occupation_fraction": {repr(float(k)): v for k, v in sorted(self.occupation_fraction.items())},
            "local_time_estimate": {repr(float(k)): v for k, v in sorted(self.local_time_estimate.items())},
            "local_time_se": {repr(float(k)): v for k, v in sorted(self.local_time_se.items())},
            "weak_comparison": None if self.weak_comparison is None else self.weak_comparison.to_dict(),
            "checks": dict(sorted(self.checks.items())),
            "passed": self.passed,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        """Human-readable two-column table."""
        rows: list[tuple[str, str]] = []
        for k, v in sorted(self.ode_residual_max.items()):
            rows.append((f"ODE residual max ({k})", f"{v:.3e}"))
        if self.roundtrip_max is not None:
            rows.append(("roundtrip max |H(G(x)) - x|", f"{self.roundtrip_max:.3e}"))
            rows.append(("roundtrip inversion failures", str(self.roundtrip_failures)))
        if self.drift_jump_original is not None:
            rows.append(("drift jump (original)", f"{self.drift_jump_original:.6g}"))
        if self.drift_jump_max is not None:
            rows.append(("drift jump (transformed)", f"{self.drift_jump_max:.3e}"))
        for eps, v in sorted(self.occupation_fraction.items()):
            rows.append((f"occupation fraction (eps={eps:g})", f"{v:.6g}"))
        for a, v in sorted(self.local_time_estimate.items()):
            se = self.local_time_se.get(a)
            rows.append((f"local time at {a:g}", f"{v:.6g}" + ("" if se is None else f" +- {se:.2g}")))
        wc = self.weak_comparison
        if wc is not None:
            rows.append(("estimate (direct)", f"{wc.estimate_direct:.6g}"))
            rows.append(("estimate (transformed)", f"{wc.estimate_transformed:.6g}"))
            rows.append(("combined SE", f"{wc.combined_se:.3g}"))
            rows.append(("z-score", f"{wc.z_score:.3f}"))
        for name, ok in sorted(self.checks.items()):
            rows.append((f"check: {name}", "pass" if ok else "FAIL"))
        width = max((len(r[0]) for r in rows), default=0)
        lines = [f"{name.ljust(width)}  {value}" for name, value in rows]
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


# ----------------------------------------------------------------------
# sampling helpers
# ----------------------------------------------------------------------
def ball_sample(center, radius: float, n: int, seed: int = 0, boundary_fraction: float = 0.0) -> np.ndarray:
    """``n`` points uniformly distributed in a ball; a fraction lies on the sphere."""
    center = np.asarray(center, dtype=float).reshape(-1)
    d = center.size
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rad = radius * rng.random(n) ** (1.0 / d)
    n_edge = int(round(boundary_fraction * n))
    rad[:n_edge] = radius
    return center + rad[:, None] * dirs


def chart_grid(chart: TransformChart, n: int = 1000, seed: int = 0, exclusion: float = RESIDUAL_EXCLUSION) -> np.ndarray:
    """Sample of the chart ball (chart coordinates) avoiding ``|x1| < exclusion``."""
    pts = ball_sample(chart.center, chart.radius, 2 * n + 16, seed)
    pts = pts[np.abs(pts[:, 0]) >= exclusion]
    if pts.shape[0] < n:
        raise InputError("chart ball too thin to sample away from the discontinuity")
    return pts[:n]


# ----------------------------------------------------------------------
# transform identities
# ----------------------------------------------------------------------
def _first_partials(table, pts: np.ndarray) -> np.ndarray:
    """``d g / d x1`` for every tabulated component (chart evaluator)."""
    return table.evaluate(pts, want=1).g1


def _second_x1(table, pts: np.ndarray, step: float) -> np.ndarray:
    """``d^2 g / d x1^2`` by differencing the first-derivative evaluator.

    Central differences where the stencil stays on one side of ``{x1 = 0}``,
    second-order one-sided differences (pointing away from 0) otherwise.
    """
    x1 = pts[:, 0]
    out = np.empty((pts.shape[0], len(table.g_comps)))
    central = np.abs(x1) > step
    if np.any(central):
        p = pts[central]
        plus, minus = p.copy(), p.copy()
        plus[:, 0] += step
        minus[:, 0] -= step
        out[central] = (_first_partials(table, plus) - _first_partials(table, minus)) / (2.0 * step)
    side = ~central
    if np.any(side):
        p = pts[side]
        s = np.where(p[:, 0] >= 0.0, step, -step)
        p1, p2 = p.copy(), p.copy()
        p1[:, 0] += s
        p2[:, 0] += 2.0 * s
        f0, f1, f2 = (_first_partials(table, q) for q in (p, p1, p2))
        out[side] = (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * s[:, None])
    return out


def ode_residual(chart: TransformChart, grid=None, step: float = RESIDUAL_STEP) -> dict[str, float]:
    """Maximum absolute residual of the defining ODEs of ``g_1`` and ``g_k``.

    For ``g_1``: ``mu_1 g_1' + 1/2 a g_1''``; for ``g_k`` (k >= 2):
    ``mu_k + mu_1 g_k' + 1/2 a g_k''``, where ``'`` is ``d/dx1``,
    ``a = (sigma sigma^T)_11`` and the drift half is chosen by the sign of
    ``x1``.  First derivatives come from the chart's derivative evaluator and
    second derivatives from differencing it, so the residual measures the
    tabulation error rather than restating the ODE.

    ``grid`` (chart coordinates) defaults to 1000 points of the chart ball;
    points with ``|x1| < 1e-6`` are rejected.  Keys are ``"g1"``, ``"g2"``, ...
    for every component that is not identically trivial (a component with
    zero drift has residual 0 and is reported as such).
    """
    table = chart.table
    field = chart.field
    pts = chart_grid(chart) if grid is None else chart._inside(grid)
    if np.any(np.abs(pts[:, 0]) < RESIDUAL_EXCLUSION):
        raise InputError(f"grid must stay at least {RESIDUAL_EXCLUSION:g} away from x1 = 0")
    out = {f"g{k + 1}": 0.0 for k in range(field.dim) if k == 0 or k not in field.zero_drift}
    if table.trivial:
        return out
    mu = np.empty_like(pts)
    plus = pts[:, 0] >= 0.0
    if np.any(plus):
        mu[plus] = np.asarray(field.drift_plus(pts[plus]), dtype=float).reshape(-1, field.dim)
    if not np.all(plus):
        mu[~plus] = np.asarray(field.drift_minus(pts[~plus]), dtype=float).reshape(-1, field.dim)
    a = field.a11(pts)
    d1 = _first_partials(table, pts)
    d2 = _second_x1(table, pts, step)
    for c, k in enumerate(table.g_comps):
        res = mu[:, 0] * d1[:, c] + 0.5 * a * d2[:, c]
        if k > 0:
            res = res + mu[:, k]
        out[f"g{k + 1}"] = float(np.max(np.abs(res)))
    return out


def roundtrip_error(chart: TransformChart, sample=None, n: int = 1000, seed: int = 0) -> tuple[float, int]:
    """``max |H(G(x)) - x|`` over a sample of the chart ball and the number of failed inversions.

    The default sample has ``n`` points, a tenth of them on the boundary
    sphere.  ``H`` starts from ``z`` clipped to the ball, as in :meth:`TransformChart.apply_H`.
    """
    pts = ball_sample(chart.center, chart.radius, n, seed, boundary_fraction=0.1) if sample is None else chart._inside(sample)
    z = chart.apply_G(pts)
    tol = chart.tolerances
    x, status, _ = chart.table.invert(z, z, chart.center, chart.radius, tol.newton, tol.newton_max_iter)
    ok = status == K.OK
    err = float(np.max(np.linalg.norm(x[ok] - pts[ok], axis=1))) if np.any(ok) else float("nan")
    return err, int(np.sum(~ok))


def drift_jump(chart: TransformChart, rest_grid=None, n: int = 101, offset: float = JUMP_OFFSET) -> tuple[float, float]:
    """Drift discontinuity across ``{x1 = 0}`` before and after the transform.

    ``jump_original = max |mu+(0, r) - mu-(0, r)|`` and
    ``jump_transformed = max |mu~(+offset, r) - mu~(-offset, r)|`` over the
    ``x_rest`` grid ``r`` (chart coordinates; default: ``n`` points spread
    over the part of the hyperplane inside the chart ball).  ``mu~`` is
    evaluated at ``z = (+-offset, r)`` through ``H``.
    """
    field = chart.field
    d = field.dim
    if rest_grid is None:
        if d == 1:
            rest = np.zeros((1, 0))
        else:
            reach = math.sqrt(max(chart.radius**2 - chart.center[0] ** 2, 0.0))
            if reach <= 0.0:
                raise InputError("the chart ball does not meet the discontinuity")
            if d == 2:
                rest = (chart.center[1] + 0.9 * reach * np.linspace(-1.0, 1.0, n))[:, None]
            else:
                rest = ball_sample(chart.center[1:], 0.9 * reach, n, seed=1)
    else:
        rest = np.asarray(rest_grid, dtype=float).reshape(-1, d - 1)
    on = np.zeros((rest.shape[0], d))
    on[:, 1:] = rest
    jump_orig = float(np.max(np.linalg.norm(
        np.asarray(field.drift_plus(on), dtype=float).reshape(-1, d)
        - np.asarray(field.drift_minus(on), dtype=float).reshape(-1, d), axis=1)))
    zp, zm = on.copy(), on.copy()
    zp[:, 0] = offset
    zm[:, 0] = -offset
    xp = chart.apply_H(zp, x_init=zp)
    xm = chart.apply_H(zm, x_init=zm)
    mup = coefficients_at(chart.table, xp)[0]
    mum = coefficients_at(chart.table, xm)[0]
    jump_tr = float(np.max(np.linalg.norm(mup - mum, axis=1)))
    return jump_orig, jump_tr


# ----------------------------------------------------------------------
# path functionals
# ----------------------------------------------------------------------
def _switch_values(states: np.ndarray, field: CoefficientField | None) -> np.ndarray:
    return states[..., 0] if field is None else field.side(states.reshape(-1, states.shape[-1])).reshape(states.shape[:-1])


def occupation_time(traj: Trajectory, eps: float, field: CoefficientField | None = None) -> float:
    """Time fraction spent within ``eps`` of the discontinuity.

    The step-weighted fraction ``sum_n h_n 1{|s(X_n)| < eps} / T`` with the
    switching quantity ``s = x1`` (or ``f(x)`` when ``field`` has a switch
    surface), using the left end point of every step.
    """
    if not eps > 0:
        raise InputError("eps must be positive")
    if traj.states.shape[0] < 2:
        raise InputError("trajectory has no steps")
    s = _switch_values(traj.states[:-1], field)
    h = np.diff(traj.times)
    return float(np.sum(h * (np.abs(s) < eps)) / (traj.times[-1] - traj.times[0]))


def local_time_estimate(
    paths: Sequence[Trajectory],
    a: float,
    eps: float,
    field: CoefficientField | None = None,
    quadratic_variation: str = "model",
) -> tuple[float, float]:
    """Mean and standard error of ``(1/2eps) sum_n 1{|X1_n - a| < eps} q_n`` over paths.

    ``q_n`` is the quadratic-variation increment of ``X1``: the model value
    ``(sigma sigma^T)_11(X_n) h_n`` (``quadratic_variation="model"``, needs
    ``field``; lower variance) or ``(X1_{n+1} - X1_n)^2``
    (``"increments"``).  Without ``field`` the model value is ``h_n``
    (unit diffusion).
    """
    if not eps > 0:
        raise InputError("eps must be positive")
    if quadratic_variation not in ("model", "increments"):
        raise InputError("quadratic_variation must be 'model' or 'increments'")
    vals = []
    for tr in paths:
        x = tr.states
        h = np.diff(tr.times)
        near = np.abs(x[:-1, 0] - a) < eps
        if quadratic_variation == "increments":
            q = np.diff(x[:, 0]) ** 2
        elif field is None:
            q = h
        else:
            q = field.a11(x[:-1]) * h
        vals.append(float(np.sum(q * near)) / (2.0 * eps))
    vals = np.asarray(vals)
    if vals.size == 0:
        raise InputError("no trajectories given")
    se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
    return float(vals.mean()), se


class OccupationObserver:
    """Accumulates per-path occupation fractions for several ``eps`` during a run.

    Pass it as ``observer`` to :meth:`PathEngine.run`; results cover the paths
    of the last run.
    """

    def __init__(self, eps: Sequence[float], field: CoefficientField | None = None):
        self.eps = np.asarray(sorted(float(e) for e in eps))
        if np.any(self.eps <= 0):
            raise InputError("eps must be positive")
        self.field = field
        self.time = None
        self.total = 0.0

    def __call__(self, n, t, dt, states, alive):
        if n == 0:
            self.time = np.zeros((states.shape[0], self.eps.size))
            self.total = 0.0
        if dt == 0.0:
            return
        s = np.abs(_switch_values(states, self.field))
        self.time += dt * ((s[:, None] < self.eps[None, :]) & alive[:, None])
        self.total += dt

    def fractions(self) -> np.ndarray:
        """``(n_paths, n_eps)`` occupation fractions."""
        return self.time / self.total


class LocalTimeObserver:
    """Accumulates per-path local-time estimates at level ``a`` during a run."""

    def __init__(self, a: float, eps: float, field: CoefficientField | None = None, quadratic_variation: str = "model"):
        if not eps > 0:
            raise InputError("eps must be positive")
        if quadratic_variation not in ("model", "increments"):
            raise InputError("quadratic_variation must be 'model' or 'increments'")
        self.a, self.eps, self.field, self.mode = float(a), float(eps), field, quadratic_variation
        self.acc = None
        self._prev = None

    def __call__(self, n, t, dt, states, alive):
        x1 = states[:, 0]
        if n == 0:
            self.acc = np.zeros(states.shape[0])
        if self.mode == "increments":
            if self._prev is not None:
                prev_x1, prev_near = self._prev
                self.acc += prev_near * (x1 - prev_x1) ** 2
            near = (np.abs(x1 - self.a) < self.eps) & alive
            self._prev = (x1.copy(), near) if dt > 0.0 else None
            return
        if dt == 0.0:
            return
        near = (np.abs(x1 - self.a) < self.eps) & alive
        q = dt if self.field is None else self.field.a11(states) * dt
        self.acc += near * q

    def estimates(self) -> np.ndarray:
        return self.acc / (2.0 * self.eps)


def projection_overshoot(field: CoefficientField, x0, cfg: SimConfig, paths=None) -> float:
    """Largest displacement ``max |P(x) - x|`` applied by the field's projection ``P``.

    Runs the direct scheme and records, over all steps and paths, how far the
    unprojected Euler iterate lay outside the admissible set before it was
    projected back (for the dividend model: ``max(0, theta1 - X2, X2 - theta2)``).
    Returns 0 when the field has no projection.
    """
    if field.project is None:
        return 0.0
    project = field.project
    worst = [0.0]

    def recording(x):
        y = project(x)
        if x.size:
            worst[0] = max(worst[0], float(np.max(np.abs(y - x))))
        return y

    eng = PathEngine(replace(field, project=recording), x0, replace(cfg, scheme="direct"))
    paths = np.arange(cfg.n_paths) if paths is None else np.asarray(paths, dtype=np.int64)
    for lo in range(0, paths.size, cfg.batch_size):
        eng.run(paths[lo : lo + cfg.batch_size])
    return worst[0]


# ----------------------------------------------------------------------
# weak comparison
# ----------------------------------------------------------------------
def compare_weak(
    field: CoefficientField,
    x0,
    cfg: SimConfig,
    phi: Callable[[np.ndarray], np.ndarray],
    matched: bool = False,
    min_completion: float = 0.9,
    engines: tuple[PathEngine | None, PathEngine | None] = (None, None),
) -> WeakComparison:
    """Monte Carlo estimates of ``E phi(X_T)`` by the direct and the transformed route.

    The routes use independent noise streams derived from ``cfg.base_seed``
    unless ``matched`` (then both use ``cfg.base_seed`` itself).  The z-score
    is ``|difference| / sqrt(se_direct^2 + se_transformed^2)``.

    Raises :class:`EstimationError` when either route completes fewer than
    ``min_completion`` of its paths.
    """
    results = {}
    for scheme, eng in zip(("direct", "transformed"), engines):
        seed = cfg.base_seed if matched else derive_seed(cfg.base_seed, scheme)
        c = replace(cfg, scheme=scheme, base_seed=seed)
        if eng is not None:
            eng.cfg = replace(eng.cfg, base_seed=seed)
        res = monte_carlo(field, x0, c, phi, engine=eng)
        if res.n_effective < min_completion * cfg.n_paths:
            raise EstimationError(
                f"{scheme} scheme completed {res.n_effective} of {cfg.n_paths} paths", res.terminations
            )
        results[scheme] = res
    d, t = results["direct"], results["transformed"]
    se = math.sqrt(d.std_error**2 + t.std_error**2)
    diff = abs(d.estimate - t.estimate)
    z = diff / se if se > 0 else (0.0 if diff == 0 else float("inf"))
    return WeakComparison(d.estimate, t.estimate, se, z, d, t, matched)
