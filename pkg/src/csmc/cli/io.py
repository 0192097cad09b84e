"""Output files written by the CLI.

Every file is built in memory and checked first, then written into a
temporary directory next to the target and moved into place with
:func:`os.replace`, so a failed run leaves no partial outputs.  Floats are
printed with 17 significant digits (``format(x, ".17g")``), which
round-trips every IEEE double exactly.

Column orders
-------------
``paths.csv``
    ``particle, log_weight, x_0, ..., x_T``; one row per particle.
    ``log_weight`` is the log of the normalised weight (``-inf`` for a killed
    particle).  States with more than one component use ``x_<t>_<k>``.
``means.csv``
    ``t, mean, se_ess, se_lineage`` and ``exact`` when an exact reference
    exists.
``marginals.csv``
    ``t, lower, upper, count, mass``: unweighted counts and normalised
    weight mass per histogram cell.
``mse.csv``
    ``t`` then one ``mse_<method>`` column per method.
``heatmap.csv``
    ``t, x, log_priority``.
``pilots.csv``
    the estimator format of :func:`csmc.priority.base.histograms_to_csv`.
``bench.csv``
    one row per method; columns depend on the experiment.
``summary.json``
    run statistics plus ``config`` (fully resolved) and ``seed``.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from csmc.engine import marginal_means
from csmc.errors import CsmcError
from csmc.particles import ParticleEnsemble


class OutputError(CsmcError):
    """Results cannot be turned into output files (e.g. an empty ensemble)."""


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return format(float(value), ".17g")


@dataclass
class Table:
    header: list
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        width = len(self.header)
        lines = [",".join(self.header)]
        for r in self.rows:
            if len(r) != width:
                raise OutputError(f"row of width {len(r)} under a {width}-column header {self.header[:3]}...")
            lines.append(",".join(fmt(v) for v in r))
        return "\n".join(lines) + "\n"


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)  # "inf", "-inf", "nan" as strings
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class OutputBundle:
    """Named CSV tables plus the JSON summary."""

    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)  # file name -> prepared text

    def render(self) -> dict:
        files = {f"{name}.csv": t.to_csv() for name, t in self.tables.items()}
        files.update(self.raw)
        files["summary.json"] = json.dumps(_json_safe(self.summary), indent=2, sort_keys=True) + "\n"
        return files


def write_outputs(bundle: OutputBundle, out_dir: str) -> list[str]:
    """Write every file of ``bundle`` into ``out_dir`` or none of them.

    Returns the written paths.  Raises :class:`OutputError` before touching
    the file system if the bundle is invalid, and ``OSError`` on I/O
    failure (after removing the temporary directory).
    """
    files = bundle.render()
    os.makedirs(out_dir, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".csmc-", dir=out_dir)
    try:
        for name, text in files.items():
            with open(os.path.join(tmp, name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        written = []
        for name in sorted(files):
            dest = os.path.join(out_dir, name)
            os.replace(os.path.join(tmp, name), dest)
            written.append(dest)
        return written
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


# ---------------------------------------------------------------------------
# Table builders
# ---------------------------------------------------------------------------


def _check(ensemble: ParticleEnsemble):
    if ensemble is None or ensemble.n == 0:
        raise OutputError("report: the final ensemble is empty; nothing to write")


def paths_table(ensemble: ParticleEnsemble) -> Table:
    _check(ensemble)
    n, T1, d = ensemble.paths.shape
    if d == 1:
        cols = [f"x_{t}" for t in range(T1)]
    else:
        cols = [f"x_{t}_{k}" for t in range(T1) for k in range(d)]
    with np.errstate(divide="ignore"):  # killed particles keep log_weight -inf
        lw = np.log(ensemble.normalized_weights())
    flat = ensemble.paths.reshape(n, T1 * d)
    rows = [[i, lw[i], *flat[i]] for i in range(n)]
    return Table(["particle", "log_weight", *cols], rows)


def means_table(ensemble: ParticleEnsemble, exact: np.ndarray | None = None) -> Table:
    _check(ensemble)
    mean, se = marginal_means(ensemble)
    _, se_lin = marginal_means(ensemble, se="lineage")
    header = ["t", "mean", "se_ess", "se_lineage"] + (["exact"] if exact is not None else [])
    rows = []
    for t in range(mean.size):
        row = [t, mean[t], se[t], se_lin[t]]
        if exact is not None:
            row.append(exact[t])
        rows.append(row)
    return Table(header, rows)


def histogram_rows(t: int, values: np.ndarray, weights: np.ndarray, edges: np.ndarray) -> list:
    counts, _ = np.histogram(values, bins=edges)
    mass, _ = np.histogram(values, bins=edges, weights=weights)
    return [[t, edges[k], edges[k + 1], int(counts[k]), mass[k]] for k in range(counts.size)]


def marginals_table(ensemble: ParticleEnsemble, times: Sequence[int] | None = None, bins: int = 50,
                    edges: np.ndarray | None = None) -> Table:
    """Histograms of the first state component at ``times`` (default all).

    Without ``edges`` each time gets ``bins`` equal cells spanning its sample
    range.
    """
    _check(ensemble)
    w = ensemble.normalized_weights()
    times = range(ensemble.time + 1) if times is None else times
    rows = []
    for t in times:
        x = ensemble.paths[:, t, 0]
        e = edges
        if e is None:
            lo, hi = float(x.min()), float(x.max())
            if hi <= lo:
                lo, hi = lo - 0.5, hi + 0.5
            e = np.linspace(lo, hi, bins + 1)
        rows.extend(histogram_rows(int(t), x, w, e))
    return Table(["t", "lower", "upper", "count", "mass"], rows)


def mse_table(curves: dict) -> Table:
    methods = list(curves)
    T1 = len(next(iter(curves.values())))
    rows = [[t, *(curves[m][t] for m in methods)] for t in range(T1)]
    return Table(["t", *(f"mse_{m}" for m in methods)], rows)


def heatmap_table(times: Sequence[int], grid: np.ndarray, log_values: np.ndarray) -> Table:
    rows = [[int(t), x, log_values[i, j]] for i, t in enumerate(times) for j, x in enumerate(grid)]
    return Table(["t", "x", "log_priority"], rows)


def records_table(records: list[dict]) -> Table:
    """One row per dict; columns in first-seen key order."""
    header: list = []
    for r in records:
        header.extend(k for k in r if k not in header)
    return Table(header, [[r.get(k) for k in header] for r in records])
