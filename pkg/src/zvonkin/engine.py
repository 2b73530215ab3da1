"""Euler-Maruyama path simulation, directly or through the transform.

Two routes simulate the same SDE:

``direct``
    ``X_{n+1} = X_n + mu(X_n) h + sigma(X_n) dW_n`` on the original
    (discontinuous) coefficients.
``transformed``
    ``Z = G(X)`` is stepped with the transformed coefficients and mapped back
    by ``X = H(Z)``.  Each path carries its own chart (center, radius); when
    it strays beyond ``rho * radius`` from the center the chart is re-centred
    at the current state and ``Z`` is reset to ``G(X)``.

Both routes draw their increments from the same counter-based stream, so for
a fixed seed and path index they see identical noise.
"""

from __future__ import annotations

import math
import multiprocessing as mp
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import _kernels as K
from .errors import (
    EstimationError,
    InputError,
    NumericError,
    SimulationError,
    ZvonkinError,
)
from .model import CoefficientField
from .rng import NoiseStream, as_seed
from .transform import (
    Tolerances,
    TransformTable,
    build_chart,
    coefficients_at,
    min_singular_values,
    shell_points,
)

SCHEMES = ("direct", "transformed")
HORIZON, EXPLOSION = 0, 1
TERMINATION_NAMES = {HORIZON: "horizon", EXPLOSION: "explosion_guard"}

#: observer(step_index, time, dt, states, alive); called for n = 0..N with dt = 0 at the end
Observer = Callable[[int, float, float, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    Attributes
    ----------
    step, horizon:
        Time step ``h`` and horizon ``T`` (the last step is shortened when
        ``T`` is not a multiple of ``h``).
    n_paths, base_seed:
        Number of paths and the 64-bit seed of the noise stream.
    r_max:
        Explosion guard: a path stops once ``|X| > r_max``.
    chart_exit_fraction:
        Re-centre a chart when ``|X - center| > chart_exit_fraction * radius``.
    scheme:
        ``"direct"`` or ``"transformed"``.
    chart_radius:
        Radius hint of the charts (certified and possibly shrunk).
    batch_size, workers:
        Paths per vectorised batch and worker processes for Monte Carlo.
    """

    step: float
    horizon: float
    n_paths: int = 1
    base_seed: int = 0
    r_max: float = 1e6
    chart_exit_fraction: float = 0.8
    scheme: str = "direct"
    chart_radius: float = 1.0
    batch_size: int = 25_000
    workers: int = 1
    tolerances: Tolerances = dc_field(default_factory=Tolerances)

    def __post_init__(self):
        if not (self.step > 0 and math.isfinite(self.step)):
            raise InputError("step must be positive")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise InputError("horizon must be positive")
        if self.step > self.horizon:
            raise InputError("step must not exceed the horizon")
        if int(self.n_paths) < 1:
            raise InputError("n_paths must be >= 1")
        if not 0 < self.chart_exit_fraction < 1:
            raise InputError("chart_exit_fraction must lie in (0, 1)")
        if not self.r_max > 0:
            raise InputError("r_max must be positive")
        if self.scheme not in SCHEMES:
            raise InputError(f"scheme must be one of {SCHEMES}")
        if not self.chart_radius > 0:
            raise InputError("chart_radius must be positive")
        if int(self.batch_size) < 1 or int(self.workers) < 1:
            raise InputError("batch_size and workers must be >= 1")


def time_grid(step: float, horizon: float) -> np.ndarray:
    """``0, h, 2h, ..., T`` with a shortened final step when needed."""
    ratio = horizon / step
    n_full = round(ratio) if abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio) else math.floor(ratio)
    times = np.arange(n_full + 1, dtype=float) * step
    if horizon - times[-1] > 1e-12 * horizon:
        times = np.append(times, horizon)
    else:
        times[-1] = horizon
    return times


def step_sizes(step: float, times: np.ndarray) -> np.ndarray:
    """Step lengths of a :func:`time_grid`: exactly ``step`` except a shortened last step.

    Differencing the grid would perturb ``h`` in the last bits; the exact
    value keeps deterministic recursions such as ``x + (1/2 - sgn x) h`` exact.
    """
    dts = np.full(len(times) - 1, float(step))
    if dts.size and abs(times[-1] - times[-2] - step) > 1e-9 * step:
        dts[-1] = times[-1] - times[-2]
    return dts


@dataclass
class Trajectory:
    """One simulated path.

    ``termination`` is ``"horizon"`` or ``"explosion_guard"``; the number of
    chart re-centrings (transformed scheme) is kept in ``chart_rebuilds``.
    """

    times: np.ndarray
    states: np.ndarray
    termination: str
    chart_rebuilds: int = 0
    seed_used: int = 0
    path_index: int = 0
    scheme: str = "direct"

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)


@dataclass
class BatchResult:
    paths: np.ndarray
    final: np.ndarray
    termination: np.ndarray
    stop_step: np.ndarray
    rebuilds: np.ndarray
    states: np.ndarray | None = None  # (N+1, n, d) when recorded

    def trajectory(self, i: int, times: np.ndarray, seed: int, scheme: str) -> Trajectory:
        stop = int(self.stop_step[i])
        return Trajectory(
            times=times[: stop + 1].copy(),
            states=self.states[: stop + 1, i, :].copy(),
            termination=TERMINATION_NAMES[int(self.termination[i])],
            chart_rebuilds=int(self.rebuilds[i]),
            seed_used=seed,
            path_index=int(self.paths[i]),
            scheme=scheme,
        )


class PathEngine:
    """Vectorised simulator for one field, start point and configuration.

    The transformed route builds its first chart at construction; the
    underlying transform table is shared by all paths and grows as paths
    explore new regions.
    """

    def __init__(self, field: CoefficientField, x0, cfg: SimConfig):
        self.field = field
        self.cfg = cfg
        self.x0 = np.asarray(x0, dtype=float).reshape(-1)
        if self.x0.size != field.dim:
            raise InputError(f"x0 must have dimension {field.dim}")
        self.times = time_grid(cfg.step, cfg.horizon)
        self.dts = step_sizes(cfg.step, self.times)
        self.columns = field.active_columns
        self.chart = None
        if cfg.scheme == "transformed":
            try:
                self.chart = build_chart(field, self.x0, cfg.chart_radius, cfg.tolerances)
            except ZvonkinError as exc:
                raise SimulationError(f"initial chart failed: {exc}", state=self.x0, step=0) from exc
            self.table: TransformTable = self.chart.table
            self.flat = self.chart.field
            self.schart = self.chart.surface_chart
            self._unit_shell = shell_points(np.zeros(field.dim), 1.0, cfg.tolerances.shell_points_per_dim)

    # ------------------------------------------------------------------
    def run(self, paths, seed: int | None = None, observer: Observer | None = None, record: bool = False) -> BatchResult:
        paths = np.asarray(paths, dtype=np.int64).reshape(-1)
        seed = self.cfg.base_seed if seed is None else seed
        stream = NoiseStream(seed, self.field.dim, self.columns)
        if self.cfg.scheme == "direct":
            return self._run_direct(paths, stream, observer, record)
        return self._run_transformed(paths, stream, observer, record)

    def _noise(self, stream, keys, n, dt, buf):
        stream.normals(keys, n, buf)
        return math.sqrt(dt) * buf

    def _diffuse(self, sig, dw):
        cols = self.columns
        if len(cols) == 1:
            c = cols[0]
            return sig[:, :, c] * dw[:, c : c + 1]
        return np.einsum("nij,nj->ni", sig[:, :, cols], dw[:, cols])

    def _check_finite(self, x, idx, n, paths):
        bad = ~np.all(np.isfinite(x), axis=1)
        if np.any(bad):
            p = int(paths[idx[np.argmax(bad)]])
            raise NumericError(f"non-finite state at step {n + 1} of path {p}", step=n + 1, path=p)

    # -- direct ------------------------------------------------------------
    def _run_direct(self, paths, stream, observer, record) -> BatchResult:
        field, cfg = self.field, self.cfg
        n, d = paths.size, field.dim
        x = np.tile(self.x0, (n, 1))
        alive = np.ones(n, dtype=bool)
        term = np.full(n, HORIZON, dtype=np.int64)
        stop = np.full(n, len(self.dts), dtype=np.int64)
        states = np.empty((len(self.times), n, d)) if record else None
        if record:
            states[0] = x
        keys = stream.keys(paths)
        buf = np.zeros((n, d))
        for k, dt in enumerate(self.dts):
            if observer is not None:
                observer(k, self.times[k], dt, x, alive)
            all_alive = alive.all()
            idx = np.arange(n) if all_alive else np.flatnonzero(alive)
            if idx.size:
                xa = x if all_alive else x[idx]
                mu, sig = field.coefficients(xa)
                dw = self._noise(stream, keys if all_alive else keys[idx], k, dt, buf if all_alive else np.zeros((idx.size, d)))
                xn = xa + mu * dt + self._diffuse(sig, dw)
                if field.project is not None:
                    xn = field.project(xn)
                self._check_finite(xn, idx, k, paths)
                x[idx] = xn
                self._guard(x, idx, alive, term, stop, k)
            if record:
                states[k + 1] = x
        if observer is not None:
            observer(len(self.dts), self.times[-1], 0.0, x, alive)
        return BatchResult(paths, x, term, stop, np.zeros(n, dtype=np.int64), states)

    def _guard(self, x, idx, alive, term, stop, k):
        far = np.linalg.norm(x[idx], axis=1) > self.cfg.r_max
        if np.any(far):
            hit = idx[far]
            alive[hit] = False
            term[hit] = EXPLOSION
            stop[hit] = k + 1

    # -- transformed -------------------------------------------------------
    def _ensure_table(self, lo, hi):
        try:
            self.table = self.table.extend(lo, hi)
        except ZvonkinError as exc:
            raise SimulationError(f"transform table could not be extended: {exc}") from exc

    def certify_many(self, centers: np.ndarray, r_init: float) -> np.ndarray:
        """Certified radii for charts at several centers (table-based, shrinking)."""
        tols = self.cfg.tolerances
        m, d = centers.shape
        radii = np.full(m, float(r_init))
        pending = np.arange(m)
        for _ in range(tols.max_shrinks):
            c, r = centers[pending], radii[pending]
            self._ensure_table((c - 1.01 * r[:, None]).min(axis=0), (c + 1.01 * r[:, None]).max(axis=0))
            pts = c[:, None, :] + r[:, None, None] * self._unit_shell[None, :, :]
            jac = self.table.map_and_jacobian(pts.reshape(-1, d))[1]
            smin = min_singular_values(jac).reshape(pending.size, -1).min(axis=1)
            pending = pending[smin < tols.delta_inv]
            if pending.size == 0:
                return radii
            radii[pending] *= tols.shrink
        raise SimulationError("no certified chart radius near state", state=centers[pending[0]])

    def _to_original(self, y):
        return y if self.schart is None else self.schart.to_original(y)

    def _run_transformed(self, paths, stream, observer, record) -> BatchResult:
        cfg, tols = self.cfg, self.cfg.tolerances
        n, d = paths.size, self.field.dim
        y0 = self.chart.center
        y = np.tile(y0, (n, 1))
        centers = y.copy()
        radii = np.full(n, self.chart.radius)
        z = np.tile(self.table.map_and_jacobian(y0[None, :])[0][0], (n, 1))
        x = self._to_original(y)
        alive = np.ones(n, dtype=bool)
        term = np.full(n, HORIZON, dtype=np.int64)
        stop = np.full(n, len(self.dts), dtype=np.int64)
        rebuilds = np.zeros(n, dtype=np.int64)
        states = np.empty((len(self.times), n, d)) if record else None
        if record:
            states[0] = x
        keys = stream.keys(paths)
        project = self.field.project
        for k, dt in enumerate(self.dts):
            if observer is not None:
                observer(k, self.times[k], dt, x, alive)
            idx = np.flatnonzero(alive)
            if idx.size:
                ya = y[idx]
                mu, sig, jac = coefficients_at(self.table, ya, with_jacobian=True)
                dw = self._noise(stream, keys[idx], k, dt, np.zeros((idx.size, d)))
                dz = mu * dt + self._diffuse(sig, dw)
                za = z[idx] + dz
                # first-order predictor for Newton: y + (grad G)^{-1} dz
                guess = ya + np.linalg.solve(jac, dz[:, :, None])[:, :, 0]
                yn = self._invert(za, guess, ya, idx, centers, radii, k)
                xn = self._to_original(yn)
                if project is not None:
                    xp = project(xn)
                    moved = np.any(xp != xn, axis=1)
                    if np.any(moved):
                        xn = xp
                        yn[moved] = xp[moved] if self.schart is None else self.schart.to_lifted(xp[moved])
                        za[moved] = self._G(yn[moved])
                self._check_finite(xn, idx, k, paths)
                y[idx], z[idx], x[idx] = yn, za, xn
                self._guard(x, idx, alive, term, stop, k)
                # chart exits
                live = idx[alive[idx]]
                far = np.linalg.norm(y[live] - centers[live], axis=1) > cfg.chart_exit_fraction * radii[live]
                if np.any(far):
                    self._recentre(live[far], y, z, centers, radii, rebuilds, k)
            if record:
                states[k + 1] = x
        if observer is not None:
            observer(len(self.dts), self.times[-1], 0.0, x, alive)
        return BatchResult(paths, x, term, stop, rebuilds, states)

    def _G(self, y):
        return self.table.map_and_jacobian(y)[0]

    def _recentre(self, which, y, z, centers, radii, rebuilds, k):
        try:
            radii[which] = self.certify_many(y[which], self.chart.radius)
        except SimulationError as exc:
            exc.step = k + 1
            raise
        centers[which] = y[which]
        z[which] = self._G(y[which])
        rebuilds[which] += 1

    def _invert(self, za, guess, ya, idx, centers, radii, k):
        tols = self.cfg.tolerances
        yn, status, _ = self.table.invert(za, guess, centers[idx], radii[idx], tols.newton, tols.newton_max_iter)
        bad = np.flatnonzero(status != K.OK)
        if bad.size:
            # re-centre the failing charts at the previous state and retry once
            sub = idx[bad]
            try:
                radii[sub] = self.certify_many(ya[bad], self.chart.radius)
            except SimulationError as exc:
                exc.step = k + 1
                raise
            centers[sub] = ya[bad]
            y2, st2, _ = self.table.invert(za[bad], ya[bad], centers[sub], radii[sub], tols.newton, tols.newton_max_iter)
            if np.any(st2 != K.OK):
                j = int(np.argmax(st2 != K.OK))
                raise SimulationError(
                    f"inversion failed at step {k + 1} for state {ya[bad][j]} (z={za[bad][j]})",
                    state=ya[bad][j], step=k + 1,
                )
            yn[bad] = y2
        return yn


# ----------------------------------------------------------------------
# functional interface
# ----------------------------------------------------------------------
def euler_maruyama(field: CoefficientField, x0, cfg: SimConfig, path_index: int = 0) -> Trajectory:
    """One path of the direct scheme (ignores ``cfg.scheme``)."""
    eng = PathEngine(field, x0, replace(cfg, scheme="direct"))
    return eng.run([path_index], record=True).trajectory(0, eng.times, as_seed(cfg.base_seed), "direct")


def simulate_via_transform(field: CoefficientField, x0, cfg: SimConfig, path_index: int = 0) -> Trajectory:
    """One path of the transformed scheme (ignores ``cfg.scheme``)."""
    eng = PathEngine(field, x0, replace(cfg, scheme="transformed"))
    return eng.run([path_index], record=True).trajectory(0, eng.times, as_seed(cfg.base_seed), "transformed")


def simulate(field: CoefficientField, x0, cfg: SimConfig, paths=None, observer: Observer | None = None) -> list[Trajectory]:
    """Recorded trajectories for ``paths`` (default ``0..n_paths-1``) with ``cfg.scheme``."""
    eng = PathEngine(field, x0, cfg)
    paths = np.arange(cfg.n_paths) if paths is None else np.asarray(paths, dtype=np.int64)
    out: list[Trajectory] = []
    for lo in range(0, paths.size, cfg.batch_size):
        res = eng.run(paths[lo : lo + cfg.batch_size], observer=observer, record=True)
        out.extend(res.trajectory(i, eng.times, as_seed(cfg.base_seed), cfg.scheme) for i in range(res.paths.size))
    return out


@dataclass
class MonteCarloResult:
    estimate: float
    std_error: float
    n_effective: int
    n_rebuilds_total: int
    terminations: dict[str, int]
    scheme: str = "direct"

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "std_error": self.std_error,
            "n_effective": self.n_effective,
            "n_rebuilds_total": self.n_rebuilds_total,
            "terminations": dict(sorted(self.terminations.items())),
        }


# worker-process state (set before forking)
_JOB: tuple | None = None


def _mc_batch(bounds):
    eng, phi = _JOB
    lo, hi = bounds
    res = eng.run(np.arange(lo, hi))
    done = res.termination == HORIZON
    vals = np.asarray(phi(res.final[done]), dtype=float).reshape(-1) if np.any(done) else np.zeros(0)
    return vals, np.bincount(res.termination, minlength=2), int(res.rebuilds.sum())


def monte_carlo(
    field: CoefficientField,
    x0,
    cfg: SimConfig,
    phi: Callable[[np.ndarray], np.ndarray],
    engine: PathEngine | None = None,
) -> MonteCarloResult:
    """Sample mean and standard error of ``phi(X_T)`` over paths that reached ``T``.

    ``phi`` is vectorised: it maps an ``(n, d)`` array of terminal states to
    ``n`` values.  Paths stopped by the explosion guard are excluded and
    counted in ``terminations``.
    """
    global _JOB
    if cfg.n_paths < 2:
        raise InputError("monte_carlo needs at least two paths")
    eng = engine or PathEngine(field, x0, cfg)
    bounds = [(lo, min(lo + cfg.batch_size, cfg.n_paths)) for lo in range(0, cfg.n_paths, cfg.batch_size)]
    _JOB = (eng, phi)
    try:
        if cfg.workers > 1 and len(bounds) > 1:
            ctx = mp.get_context("fork")
            with ProcessPoolExecutor(max_workers=cfg.workers, mp_context=ctx) as pool:
                parts = list(pool.map(_mc_batch, bounds))
        else:
            parts = [_mc_batch(b) for b in bounds]
    finally:
        _JOB = None
    values = np.concatenate([p[0] for p in parts])
    counts = np.sum([p[1] for p in parts], axis=0)
    terminations = {TERMINATION_NAMES[c]: int(counts[c]) for c in TERMINATION_NAMES}
    rebuilds = int(sum(p[2] for p in parts))
    if values.size == 0:
        raise EstimationError("every path terminated before the horizon", terminations)
    est = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else float("nan")
    return MonteCarloResult(est, se, int(values.size), rebuilds, terminations, cfg.scheme)


# ----------------------------------------------------------------------
# the deterministic counterexample
# ----------------------------------------------------------------------
def counterexample_run(
    h: float,
    T: float,
    sgn0: float = 0.0,
    noise: float = 0.0,
    seed: int = 0,
    path_index: int = 0,
) -> Trajectory:
    """Euler iterates of ``x' = 1/2 - sgn(x)`` from ``x = 0``.

    ``sgn0`` is the value used for ``sgn(0)``.  With ``noise > 0`` a term
    ``noise * dW`` is added (contrast run).  With ``sgn0 = 0`` and no noise the
    iterates alternate exactly between ``0`` and ``h/2``.

    Without noise the recursion is carried out in units of ``h``: the iterates
    ``y_n = x_n / h`` are multiples of 1/2, so the arithmetic is exact and
    ``x_n = h y_n`` carries no accumulated rounding (which would otherwise
    nudge an iterate off 0 and change the sign decision).
    """
    if not h > 0 or not T > 0:
        raise InputError("h and T must be positive")
    times = time_grid(h, T)
    dts = step_sizes(h, times)
    x = np.zeros(len(times))
    if not noise:
        y = 0.0
        for k, dt in enumerate(dts):
            s = math.copysign(1.0, y) if y != 0.0 else float(sgn0)
            y = y + (0.5 - s) * (dt / h)
            x[k + 1] = y * h
        return Trajectory(times, x[:, None], "horizon", seed_used=as_seed(seed), path_index=path_index, scheme="direct")
    stream = NoiseStream(seed, 1)
    keys = stream.keys([path_index])
    buf = np.zeros((1, 1))
    for k, dt in enumerate(dts):
        s = np.sign(x[k]) if x[k] != 0.0 else float(sgn0)
        x[k + 1] = x[k] + (0.5 - s) * dt + noise * math.sqrt(dt) * stream.normals(keys, k, buf)[0, 0]
    return Trajectory(times, x[:, None], "horizon", seed_used=as_seed(seed), path_index=path_index, scheme="direct")


def counterexample_exit_fraction(
    h: float, T: float, n_paths: int, level: float = 1.0, noise: float = 1.0, sgn0: float = 0.0, seed: int = 0
) -> float:
    """Fraction of noisy counterexample paths leaving ``[-level, level]`` before ``T`` (vectorised)."""
    times = time_grid(h, T)
    stream = NoiseStream(seed, 1)
    keys = stream.keys(np.arange(n_paths))
    x = np.zeros(n_paths)
    exited = np.zeros(n_paths, dtype=bool)
    buf = np.zeros((n_paths, 1))
    for k, dt in enumerate(step_sizes(h, times)):
        s = np.where(x != 0.0, np.sign(x), sgn0)
        x = x + (0.5 - s) * dt + noise * math.sqrt(dt) * stream.normals(keys, k, buf)[:, 0]
        exited |= np.abs(x) > level
    return float(exited.mean())
