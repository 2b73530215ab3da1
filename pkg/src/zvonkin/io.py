"""Deterministic file output: trajectories, JSON reports and chart dumps.

Floats are written with 17 significant digits (round-trip exact) and JSON
keys are sorted, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
from collections.abc import Iterable
from pathlib import Path

import numpy as np

from .engine import Trajectory
from .model import CoefficientField
from .transform import TransformChart


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def trajectory_csv(traj: Trajectory) -> str:
    """CSV text with header ``t,x1,...,xd`` and one row per grid time."""
    header = ",".join(["t"] + [f"x{i + 1}" for i in range(traj.dim)])
    rows = [",".join([_fmt(t)] + [_fmt(v) for v in state]) for t, state in zip(traj.times, traj.states)]
    return "\n".join([header, *rows]) + "\n"


def write_csv(traj: Trajectory, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(trajectory_csv(traj), encoding="utf-8")
    return path


def write_csv_dir(trajs: Iterable[Trajectory], directory: str | Path) -> list[Path]:
    """One ``path_<index>.csv`` file per trajectory."""
    directory = Path(directory)
    return [write_csv(tr, directory / f"path_{tr.path_index:06d}.csv") for tr in trajs]


def _json_float(x: float):
    x = float(x)
    return x if np.isfinite(x) else repr(x)


def write_jsonl(trajs: Iterable[Trajectory], path: str | Path) -> Path:
    """A JSONL stream of ``{"path", "t", "state"}`` records, path by path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for tr in trajs:
            for t, state in zip(tr.times, tr.states):
                rec = {"path": int(tr.path_index), "t": _json_float(t), "state": [_json_float(v) for v in state]}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _json_float(obj)
    return obj


def dumps(obj) -> str:
    """Canonical JSON text (sorted keys, two-space indent, trailing newline)."""
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def dump_chart(chart: TransformChart, path: str | Path) -> Path:
    """Write a chart (center, radius, tolerances, tabulated grids) as JSON."""
    return write_json(chart.to_dict(), path)


def load_chart(field: CoefficientField, path: str | Path) -> TransformChart:
    """Inverse of :func:`dump_chart` for the field the chart was built from."""
    with open(path, encoding="utf-8") as fh:
        return TransformChart.from_dict(field, json.load(fh))
