"""Run configuration: TOML file plus command-line overrides.

Sections
--------
``[model]``
    ``name`` -- a built-in (``dividend``, ``counterexample``,
    ``piecewise-constant-1d``) or ``expression``; ``params`` -- a table of
    model parameters (built-ins: ``kappa, sigma, theta1, theta2, b, clamp, a,
    m``; expressions: named constants); ``x0`` -- start / chart center.
    Expression models also take ``dim``, ``drift_plus``, ``drift_minus``,
    ``diffusion``, ``boundary`` and an optional ``surface`` table with
    ``kind = "plane"`` (``normal``, ``offset``), ``kind = "graph"``
    (``b`` as an expression in ``y``) or ``kind = "expression"`` (``f``).
``[simulation]``
    ``step, horizon, paths, seed, r_max, chart_exit_fraction, scheme,
    chart_radius, batch_size, workers, phi`` (expression of the terminal state).
``[tolerances]``
    Transform tolerances (``quadrature, newton, newton_max_iter, delta_inv,
    shrink, shell_points_per_dim, surface``) and acceptance thresholds
    (``ode_residual, roundtrip, drift_jump, z_max, ellipticity_c,
    transversality_c``).
``[output]``
    ``dir``, ``format`` (``csv`` or ``jsonl``), ``record_paths``.
``[counterexample]``
    ``steps, horizon, sgn0, noise, paths, level``.
``[validate]``
    ``half_width, points_per_dim, smoothness_order``.
"""

from __future__ import annotations

import sys
from collections.abc import Mapping
from dataclasses import dataclass, field as dc_field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .engine import SCHEMES, SimConfig
from .errors import ConfigError, InputError
from .expressions import Expression
from .model import BUILTIN_MODELS, CoefficientField, Polynomial1D, builtin, expression_field
from .surface import Surface
from .transform import Tolerances

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

SECTIONS = ("model", "simulation", "tolerances", "output", "counterexample", "validate")

DEFAULT_X0 = {
    "dividend": [0.5, 0.5],
    "counterexample": [0.0, 0.0],
    "piecewise-constant-1d": [0.0],
}

_SIM_KEYS = {
    "step": "step",
    "horizon": "horizon",
    "paths": "n_paths",
    "seed": "base_seed",
    "r_max": "r_max",
    "chart_exit_fraction": "chart_exit_fraction",
    "scheme": "scheme",
    "chart_radius": "chart_radius",
    "batch_size": "batch_size",
    "workers": "workers",
}
_TOL_KEYS = tuple(f.name for f in fields(Tolerances))


@dataclass(frozen=True)
class Thresholds:
    """Pass/fail bounds used by the subcommands."""

    ode_residual: float = 1e-6
    roundtrip: float = 1e-10
    drift_jump: float = 1e-6
    z_max: float = 3.0
    ellipticity_c: float = 0.1
    transversality_c: float = 0.1


@dataclass(frozen=True)
class CounterexampleOptions:
    steps: tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    horizon: float = 10.0
    sgn0: float = 0.0
    noise: float = 0.0
    paths: int = 1000
    level: float = 1.0


@dataclass(frozen=True)
class ValidateOptions:
    half_width: float = 1.0
    points_per_dim: int = 9
    smoothness_order: int = 3


@dataclass(frozen=True)
class RunConfig:
    """Everything a subcommand needs, fully validated."""

    model_name: str
    model_params: Mapping[str, Any]
    field: CoefficientField
    x0: np.ndarray
    sim: SimConfig
    tolerances: Tolerances
    thresholds: Thresholds = Thresholds()
    out_dir: Path = Path("out")
    out_format: str = "csv"
    record_paths: int = 100
    phi_source: str = "x1"
    counterexample: CounterexampleOptions = CounterexampleOptions()
    validate: ValidateOptions = ValidateOptions()
    chart_radius_forced: bool = False
    raw: Mapping[str, Any] = dc_field(default_factory=dict)

    def phi(self):
        """Vectorised functional of terminal states from ``phi_source``."""
        expr = Expression(self.phi_source, self.field.dim)
        return lambda x: expr(np.asarray(x, dtype=float).reshape(-1, self.field.dim))


# ----------------------------------------------------------------------
def load_toml(path: str | Path) -> dict:
    """Parse a TOML file; any failure becomes :class:`ConfigError`."""
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _table(data: Mapping, name: str) -> dict:
    value = data.get(name, {})
    if not isinstance(value, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    return dict(value)


def _number(value, what: str, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{what} must be a number, got {value!r}")
    return kind(value)


def _surface(spec: Mapping, dim: int, params: Mapping) -> Surface:
    kind = spec.get("kind")
    if kind == "plane":
        return Surface.plane(spec.get("normal", [1.0] + [0.0] * (dim - 1)), float(spec.get("offset", 0.0)))
    if kind == "graph":
        b = spec.get("b")
        if isinstance(b, list):
            return Surface.graph(Polynomial1D(b), dim)
        if not isinstance(b, str):
            raise ConfigError("graph surface needs b as an expression in y or a coefficient list")
        expr = Expression(b, 1, params, aliases={"y": 0})

        def bfun(y, _e=expr):
            return _e(np.asarray(y, dtype=float).reshape(-1, 1))

        bfun.source = b
        return Surface.graph(bfun, dim)
    if kind == "expression":
        src = spec.get("f")
        if not isinstance(src, str):
            raise ConfigError("expression surface needs f")
        return Surface.expression(src, dim, params)
    raise ConfigError(f"unknown surface kind {kind!r}; use plane, graph or expression")


def build_field(model: Mapping) -> tuple[str, dict, CoefficientField]:
    """The coefficient field described by a ``[model]`` table."""
    name = model.get("name", "dividend")
    params = model.get("params", {})
    if not isinstance(params, Mapping):
        raise ConfigError("[model].params must be a table")
    params = dict(params)
    try:
        if name in BUILTIN_MODELS:
            return name, params, builtin(name, **params)
        if name != "expression":
            raise ConfigError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS) + ['expression']}")
        dim = _number(model.get("dim"), "[model].dim", int)
        surface = model.get("surface")
        switch = _surface(surface, dim, params) if surface is not None else None
        field = expression_field(
            dim,
            model.get("drift_plus"),
            model.get("drift_minus"),
            model.get("diffusion"),
            params=params,
            boundary=model.get("boundary", "plus"),
            switch=switch,
            name="expression",
        )
        return name, params, field
    except ConfigError:
        raise
    except (InputError, TypeError) as exc:
        raise ConfigError(f"invalid model specification: {exc}") from None


def resolve(data: Mapping | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Combine parsed TOML ``data`` with command-line ``overrides``.

    Recognised overrides: ``model, seed, paths, step, horizon, scheme, out,
    radius, sgn0, noise``; ``None`` values are ignored.
    """
    data = dict(data or {})
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    model = _table(data, "model")
    if "model" in ov and ov["model"] != model.get("name"):
        model = {"name": ov["model"]}
    name, params, field = build_field(model)

    x0 = model.get("x0", DEFAULT_X0.get(name, [0.0] * field.dim))
    try:
        x0 = np.asarray(x0, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise ConfigError("[model].x0 must be a list of numbers") from None
    if x0.size != field.dim or not np.all(np.isfinite(x0)):
        raise ConfigError(f"[model].x0 must have {field.dim} finite entries")

    tol_tab = _table(data, "tolerances")
    thr_keys = {f.name for f in fields(Thresholds)}
    bad = sorted(set(tol_tab) - set(_TOL_KEYS) - thr_keys)
    if bad:
        raise ConfigError(f"unknown [tolerances] keys: {bad}")
    try:
        tolerances = Tolerances(**{k: v for k, v in tol_tab.items() if k in _TOL_KEYS})
        thresholds = Thresholds(**{k: _number(v, f"[tolerances].{k}") for k, v in tol_tab.items() if k in thr_keys})
    except ConfigError:
        raise
    except (InputError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if any(getattr(thresholds, f.name) <= 0 for f in fields(Thresholds)):
        raise ConfigError("all tolerances must be positive")

    sim_tab = _table(data, "simulation")
    phi = sim_tab.pop("phi", "x1")
    bad = sorted(set(sim_tab) - set(_SIM_KEYS))
    if bad:
        raise ConfigError(f"unknown [simulation] keys: {bad}")
    sim_kwargs: dict[str, Any] = {"step": 1e-3, "horizon": 1.0, "n_paths": 100, "base_seed": 0}
    sim_kwargs.update({_SIM_KEYS[k]: v for k, v in sim_tab.items()})
    for key, target in (("seed", "base_seed"), ("paths", "n_paths"), ("step", "step"), ("horizon", "horizon"), ("scheme", "scheme")):
        if key in ov:
            sim_kwargs[target] = ov[key]
    forced = "radius" in ov
    if forced:
        sim_kwargs["chart_radius"] = ov["radius"]
    if sim_kwargs.get("scheme", "direct") not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}")
    try:
        for key in ("n_paths", "base_seed", "batch_size", "workers"):
            if key in sim_kwargs:
                sim_kwargs[key] = _number(sim_kwargs[key], key, int)
        for key in ("step", "horizon", "r_max", "chart_exit_fraction", "chart_radius"):
            if key in sim_kwargs:
                sim_kwargs[key] = _number(sim_kwargs[key], key)
        sim = SimConfig(tolerances=tolerances, **sim_kwargs)
    except InputError as exc:
        raise ConfigError(str(exc)) from None

    out_tab = _table(data, "output")
    out_dir = Path(ov.get("out", out_tab.get("dir", "out")))
    out_format = out_tab.get("format", "csv")
    if out_format not in ("csv", "jsonl"):
        raise ConfigError("[output].format must be 'csv' or 'jsonl'")
    record_paths = _number(out_tab.get("record_paths", 100), "[output].record_paths", int)
    if record_paths < 0:
        raise ConfigError("[output].record_paths must be >= 0")

    ce_tab = _table(data, "counterexample")
    try:
        ce = CounterexampleOptions(
            steps=tuple(_number(h, "[counterexample].steps") for h in ce_tab.get("steps", CounterexampleOptions.steps)),
            horizon=_number(ce_tab.get("horizon", CounterexampleOptions.horizon), "[counterexample].horizon"),
            sgn0=_number(ov.get("sgn0", ce_tab.get("sgn0", 0.0)), "sgn0"),
            noise=_number(ov.get("noise", ce_tab.get("noise", 0.0)), "noise"),
            paths=_number(ce_tab.get("paths", CounterexampleOptions.paths), "[counterexample].paths", int),
            level=_number(ce_tab.get("level", CounterexampleOptions.level), "[counterexample].level"),
        )
    except TypeError:
        raise ConfigError("[counterexample].steps must be a list of numbers") from None
    if not ce.steps or min(ce.steps) <= 0 or ce.horizon <= 0 or ce.paths < 1 or ce.level <= 0 or ce.noise < 0:
        raise ConfigError("invalid [counterexample] options")
    if ce.sgn0 not in (-1.0, 0.0, 1.0):
        raise ConfigError("sgn0 must be -1, 0 or 1")

    va_tab = _table(data, "validate")
    va = ValidateOptions(
        half_width=_number(va_tab.get("half_width", 1.0), "[validate].half_width"),
        points_per_dim=_number(va_tab.get("points_per_dim", 9), "[validate].points_per_dim", int),
        smoothness_order=_number(va_tab.get("smoothness_order", 3), "[validate].smoothness_order", int),
    )
    if va.half_width <= 0 or va.points_per_dim < 2 or va.smoothness_order not in (1, 2, 3):
        raise ConfigError("invalid [validate] options")

    try:
        Expression(str(phi), field.dim)
    except InputError as exc:
        raise ConfigError(f"[simulation].phi: {exc}") from None

    return RunConfig(
        model_name=name,
        model_params=params,
        field=field,
        x0=x0,
        sim=sim,
        tolerances=tolerances,
        thresholds=thresholds,
        out_dir=out_dir,
        out_format=out_format,
        record_paths=record_paths,
        phi_source=str(phi),
        counterexample=ce,
        validate=va,
        chart_radius_forced=forced,
        raw=data,
    )


def load(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read an optional TOML file and apply overrides."""
    data = load_toml(path) if path is not None else {}
    return resolve(data, overrides)


def with_sim(cfg: RunConfig, **changes) -> RunConfig:
    """Copy of ``cfg`` with changed :class:`SimConfig` fields."""
    return replace(cfg, sim=replace(cfg.sim, **changes))
