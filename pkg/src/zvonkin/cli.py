"""Command-line interface.

Subcommands ``validate``, ``transform-check``, ``simulate``,
``counterexample`` and ``compare``.  Exit codes: 0 success, 1 assumption
validation failed, 2 runtime or numeric failure, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from collections.abc import Sequence

import numpy as np

from . import __version__
from . import io as zio
from .config import RunConfig, load
from .diagnostics import (
    JUMP_NOTE,
    UNIQUENESS_NOTE,
    DiagnosticsReport,
    compare_weak,
    drift_jump,
    ode_residual,
    roundtrip_error,
)
from .engine import EXPLOSION, HORIZON, TERMINATION_NAMES, PathEngine, counterexample_exit_fraction, counterexample_run
from .errors import ConfigError, InputError, ZvonkinError
from .surface import SurfaceChart
from .transform import build_chart
from .validation import (
    box_grid,
    multiscale_grid,
    validate_ellipticity,
    validate_growth,
    validate_smoothness,
    validate_transversality,
)

EXIT_OK, EXIT_ASSUMPTION, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2, 3
ABNORMAL_LIMIT = 0.1
# max |x_n| / h of the Euler cycle from 0 for each sgn(0) convention:
# 0 -> {0, h/2}; +1 -> {0, -h/2, h, h/2}; -1 -> {0, 3h/2, h, h/2}
CYCLE_BOUND = {0.0: 0.5, 1.0: 1.0, -1.0: 1.5}


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 3), not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    s = argparse.SUPPRESS
    p.add_argument("--config", metavar="PATH", default=s, help="TOML configuration file")
    p.add_argument("--model", default=s, help="built-in model name (overrides [model])")
    p.add_argument("--seed", type=int, default=s, help="base seed of the noise stream")
    p.add_argument("--out", metavar="DIR", default=s, help="output directory")
    p.add_argument("--paths", type=int, default=s, help="number of paths")
    p.add_argument("--step", type=float, default=s, help="time step h")
    p.add_argument("--horizon", type=float, default=s, help="horizon T")
    p.add_argument("--scheme", choices=("direct", "transformed"), default=s)
    p.add_argument("--radius", type=float, default=s, help="force the chart radius (no shrinking)")
    p.add_argument("--sgn0", type=float, default=s, help="value of sgn(0) for the counterexample")
    p.add_argument("--noise", type=float, default=s, help="additive noise level for the counterexample contrast run")
    p.add_argument("--json", action="store_true", default=s, help="print machine-readable reports only")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="zvonkin", description=__doc__.split("\n\n")[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "validate": "check the standing assumptions on a sample grid",
        "transform-check": "build a chart and check ODE residuals, roundtrip and drift-jump removal",
        "simulate": "simulate paths and write trajectories plus a summary",
        "counterexample": "run the deterministic counterexample on shrinking grids",
        "compare": "compare direct and transformed Monte Carlo estimates",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text, parents=[common])
        if name == "transform-check":
            sp.add_argument("--dump-chart", action="store_true", help="also write the chart as JSON")
    return parser


def _emit(args, text: str, payload: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(zio._clean(payload), indent=2, sort_keys=True))
    else:
        print(text)


# ----------------------------------------------------------------------
def cmd_validate(cfg: RunConfig, args) -> int:
    field, opts, thr = cfg.field, cfg.validate, cfg.thresholds
    grid = box_grid(cfg.x0, opts.half_width, opts.points_per_dim)
    report = validate_ellipticity(field, grid, thr.ellipticity_c)
    if field.switch is not None:
        report = report.merge(validate_transversality(SurfaceChart(field.switch, cfg.tolerances.surface), field, grid, thr.transversality_c))
    report = report.merge(validate_growth(field, np.concatenate([grid, multiscale_grid(field.dim)])))
    report = report.merge(validate_smoothness(field, grid, opts.smoothness_order))
    payload = report.to_dict()
    zio.write_json(payload, cfg.out_dir / "validation.json")
    lines = [
        f"{name:16s} {'pass' if ok else 'FAIL'}" + (" (advisory)" if name == "growth" else "")
        for name, ok in sorted(report.verdict.items())
    ]
    lines.append(f"ellipticity floor {report.ellipticity_floor:.6g} (c = {thr.ellipticity_c:g})")
    if report.transversality_floor is not None:
        lines.append(f"transversality floor {report.transversality_floor:.6g} (c = {thr.transversality_c:g})")
    d1, d2 = report.growth_constants
    lines.append(f"growth fit D1 = {d1:.4g}, D2 = {d2:.4g}, excess {report.growth_excess:.3g} (advisory)")
    failed = sorted(k for k, ok in report.smoothness_flags.items() if not ok)
    if failed:
        lines.append("smoothness failures: " + ", ".join(failed))
    lines.append("verdict: " + ("pass" if report.passed else "FAIL"))
    _emit(args, "\n".join(lines), payload)
    return EXIT_OK if report.passed else EXIT_ASSUMPTION


def cmd_transform_check(cfg: RunConfig, args) -> int:
    thr = cfg.thresholds
    chart = build_chart(cfg.field, cfg.x0, cfg.sim.chart_radius, cfg.tolerances, shrink=not cfg.chart_radius_forced)
    report = DiagnosticsReport(notes=[JUMP_NOTE])
    report.ode_residual_max = ode_residual(chart)
    report.roundtrip_max, report.roundtrip_failures = roundtrip_error(chart)
    report.checks["ode_residual"] = max(report.ode_residual_max.values(), default=0.0) <= thr.ode_residual
    report.checks["roundtrip"] = report.roundtrip_failures == 0 and report.roundtrip_max <= thr.roundtrip
    if chart.radius > abs(chart.center[0]):
        report.drift_jump_original, report.drift_jump_max = drift_jump(chart)
        report.checks["drift_jump"] = report.drift_jump_max <= thr.drift_jump
    else:
        report.notes.append("chart ball does not meet the discontinuity; drift jump not measured")
    payload = report.to_dict()
    payload["chart"] = {"center": chart.center.tolist(), "radius": chart.radius, "min_singular": chart.min_singular}
    zio.write_json(payload, cfg.out_dir / "transform_check.json")
    if getattr(args, "dump_chart", False):
        zio.dump_chart(chart, cfg.out_dir / "chart.json")
    text = f"chart center {chart.center.tolist()} radius {chart.radius:.6g}\n" + report.to_text()
    _emit(args, text, payload)
    return EXIT_OK if report.passed else EXIT_RUNTIME


def _summary(values: np.ndarray, counts: np.ndarray, rebuilds: int) -> dict:
    n = values.size
    est = float(values.mean()) if n else float("nan")
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return {
        "estimate": est,
        "std_error": se,
        "n_effective": int(n),
        "n_rebuilds_total": int(rebuilds),
        "terminations": {TERMINATION_NAMES[c]: int(counts[c]) for c in sorted(TERMINATION_NAMES)},
    }


def cmd_simulate(cfg: RunConfig, args) -> int:
    sim = cfg.sim
    eng = PathEngine(cfg.field, cfg.x0, sim)
    phi = cfg.phi()
    n = sim.n_paths
    n_rec = min(cfg.record_paths, n)
    values, counts, rebuilds = [], np.zeros(2, dtype=np.int64), 0
    trajs = []
    bounds = [(0, n_rec)] if n_rec else []
    bounds += [(lo, min(lo + sim.batch_size, n)) for lo in range(n_rec, n, sim.batch_size)]
    for lo, hi in bounds:
        rec = hi <= n_rec
        res = eng.run(np.arange(lo, hi), record=rec)
        if rec:
            trajs.extend(res.trajectory(i, eng.times, sim.base_seed, sim.scheme) for i in range(res.paths.size))
        done = res.termination == HORIZON
        if np.any(done):
            values.append(np.asarray(phi(res.final[done]), dtype=float).reshape(-1))
        counts += np.bincount(res.termination, minlength=2)
        rebuilds += int(res.rebuilds.sum())
    if cfg.out_format == "csv":
        zio.write_csv_dir(trajs, cfg.out_dir / "paths")
    else:
        zio.write_jsonl(trajs, cfg.out_dir / "paths.jsonl")
    summary = _summary(np.concatenate(values) if values else np.zeros(0), counts, rebuilds)
    zio.write_json(summary, cfg.out_dir / "summary.json")
    abnormal = counts[EXPLOSION] / n
    text = (
        f"scheme {sim.scheme}, {n} paths, {len(eng.dts)} steps\n"
        f"E[{cfg.phi_source}(X_T)] = {summary['estimate']:.6g} +- {summary['std_error']:.3g} "
        f"({summary['n_effective']} paths reached T)\n"
        f"terminations: {summary['terminations']}, chart rebuilds: {rebuilds}\n"
        f"wrote {len(trajs)} trajectories and summary.json to {cfg.out_dir}"
    )
    _emit(args, text, summary)
    return EXIT_RUNTIME if abnormal > ABNORMAL_LIMIT else EXIT_OK


def cmd_counterexample(cfg: RunConfig, args) -> int:
    opts = cfg.counterexample
    contrast = opts.noise > 0
    rows, lines, ok_all = [], [], True
    for h in opts.steps:
        traj = counterexample_run(h, opts.horizon, opts.sgn0, opts.noise, seed=cfg.sim.base_seed)
        zio.write_csv(traj, cfg.out_dir / f"counterexample_h{h:g}.csv")
        peak = float(np.max(np.abs(traj.states)))
        if contrast:
            frac = counterexample_exit_fraction(h, opts.horizon, opts.paths, opts.level, opts.noise, opts.sgn0, cfg.sim.base_seed)
            lines.append(f"h={h:g}: {frac:.1%} of {opts.paths} noisy paths leave [-{opts.level:g}, {opts.level:g}] before T={opts.horizon:g}")
            rows.append({"h": h, "max_abs": peak, "exit_fraction": frac})
            continue
        bound = CYCLE_BOUND[opts.sgn0] * h
        ok = peak <= bound
        verdict = "collapse" if ok else "no collapse"
        lines.append(f"h={h:g}: max|x_n| = {peak:.17g} <= {bound:.6g}: {verdict}")
        rows.append({"h": h, "max_abs": peak, "bound": bound, "verdict": verdict})
        ok_all &= ok
    if contrast:
        # exits are monitored on the grid only, so the finest step is the reference
        finest = min(rows, key=lambda r: r["h"])
        ok_all = finest["exit_fraction"] >= 0.99
        verdict = "escapes" if ok_all else "stays bounded"
        lines.append(f"verdict: {verdict} (finest step h={finest['h']:g}, threshold 99%)")
    payload = {"sgn0": opts.sgn0, "noise": opts.noise, "horizon": opts.horizon, "runs": rows, "passed": bool(ok_all)}
    zio.write_json(payload, cfg.out_dir / "counterexample.json")
    _emit(args, "\n".join(lines), payload)
    return EXIT_OK if ok_all else EXIT_RUNTIME


def cmd_compare(cfg: RunConfig, args) -> int:
    wc = compare_weak(cfg.field, cfg.x0, cfg.sim, cfg.phi())
    report = DiagnosticsReport(weak_comparison=wc, notes=[UNIQUENESS_NOTE])
    report.checks["z_score"] = wc.z_score <= cfg.thresholds.z_max
    payload = report.to_dict()
    zio.write_json(payload, cfg.out_dir / "comparison.json")
    _emit(args, report.to_text(), payload)
    return EXIT_OK if report.passed else EXIT_RUNTIME


COMMANDS = {
    "validate": cmd_validate,
    "transform-check": cmd_transform_check,
    "simulate": cmd_simulate,
    "counterexample": cmd_counterexample,
    "compare": cmd_compare,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: getattr(args, k, None) for k in ("model", "seed", "paths", "step", "horizon", "scheme", "out", "radius", "sgn0", "noise")}
    try:
        cfg = load(getattr(args, "config", None), overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, InputError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ZvonkinError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
