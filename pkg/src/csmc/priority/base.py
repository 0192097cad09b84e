"""Priority-score estimator containers.

An estimator set maps each time ``t`` whose next strong time lies strictly
ahead to a function returning ``log p_hat(I_{t+1:t+} | x_{0:t})`` for every
particle.  At times with no strong constraint ahead the set returns exactly
``log 1 = 0``.  Everything is kept in log scale so that long horizons do not
underflow.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from csmc.errors import ConfigurationError
from csmc.model import ConstraintSchedule
from csmc.streams import Streams

ARGUMENTS = ("state", "summary", "prefix")
OUTSIDE_RULES = ("fallback", "nearest")


@dataclass
class StateView:
    """What an estimator may look at for the particles at time ``t``.

    ``paths`` is built lazily from ``path_builder`` because most estimators
    only need the current state or the summary statistic.
    """

    current: np.ndarray
    stats: np.ndarray | None = None
    path_builder: Callable[[], np.ndarray] | None = None
    streams: Streams | None = None

    def __len__(self):
        return self.current.shape[0]

    @cached_property
    def paths(self) -> np.ndarray:
        if self.path_builder is None:
            raise ConfigurationError("this estimator needs full paths but none were supplied")
        return self.path_builder()

    @classmethod
    def from_paths(cls, paths: np.ndarray, stats=None, streams=None) -> "StateView":
        paths = np.asarray(paths, dtype=float)
        return cls(paths[:, -1], stats, lambda: paths, streams)


def _select(view: StateView, argument: str) -> np.ndarray:
    if argument == "state":
        return view.current
    if argument == "summary":
        if view.stats is None:
            raise ConfigurationError("summary-based estimator used with a model that has no summary")
        return view.stats
    return view.paths


# ---------------------------------------------------------------------------
# Partitions and histograms
# ---------------------------------------------------------------------------


def equal_width_partition(values, cells: int = 50, lower_pct: float = 1.0, upper_pct: float = 99.0) -> np.ndarray:
    """``cells`` equal-width cells spanning the percentile range of ``values``."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise ValueError("cannot build a partition from no finite values")
    if cells < 1:
        raise ValueError("a partition needs at least one cell")
    lo, hi = np.percentile(values, [lower_pct, upper_pct])
    if not hi > lo:
        # all pilots at (almost) one point: one small cell around it
        half = 0.5 * max(abs(lo) * 1e-9, 1e-9)
        lo, hi = lo - half, hi + half
    return np.linspace(lo, hi, cells + 1)


def fixed_width_partition(values, width: float, origin: float = 0.0) -> np.ndarray:
    """Cells ``[origin + k w, origin + (k+1) w)`` covering every value."""
    if not width > 0:
        raise ValueError("cell width must be positive")
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise ValueError("cannot build a partition from no finite values")
    k_lo = np.floor((values.min() - origin) / width)
    k_hi = np.floor((values.max() - origin) / width) + 1
    return origin + width * np.arange(k_lo, k_hi + 1)


@dataclass(frozen=True)
class HistogramEstimator:
    """Piecewise-constant function on an axis-aligned grid of cells.

    Attributes
    ----------
    edges : tuple of ndarray
        Strictly increasing cell boundaries per axis.
    log_coef : ndarray
        Log coefficient per cell, shape ``(D_0, D_1, ...)``.
    log_fallback : float
        Log value returned outside the partition.
    counts : ndarray
        Number of pilots that fell in each cell.
    argument : {"state", "summary"}
        Which particle quantity is binned.
    axes : tuple of int, optional
        Columns of the argument used as histogram coordinates.
    outside : {"fallback", "nearest"}
        Points beyond the partition get ``log_fallback``, or the value of
        the nearest edge cell along each axis.
    """

    edges: tuple
    log_coef: np.ndarray
    log_fallback: float
    counts: np.ndarray
    argument: str = "state"
    axes: tuple | None = None
    outside: str = "fallback"

    def __post_init__(self):
        edges = tuple(np.asarray(e, dtype=float) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        for e in edges:
            if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
                raise ValueError("cell boundaries must be strictly increasing with at least one cell")
        shape = tuple(e.size - 1 for e in edges)
        if self.log_coef.shape != shape or self.counts.shape != shape:
            raise ValueError(f"coefficient grid {self.log_coef.shape} does not match edges {shape}")
        if np.any(np.isnan(self.log_coef)) or np.any(self.log_coef == np.inf):
            raise ValueError("histogram coefficients must be nonnegative and finite")
        if self.argument not in ("state", "summary"):
            raise ValueError(f"unknown histogram argument {self.argument!r}")
        if self.outside not in OUTSIDE_RULES:
            raise ValueError(f"outside must be one of {OUTSIDE_RULES}")

    @property
    def ndim(self) -> int:
        return len(self.edges)

    @property
    def cell_volumes(self) -> np.ndarray:
        widths = [np.diff(e) for e in self.edges]
        vol = widths[0]
        for w in widths[1:]:
            vol = np.multiply.outer(vol, w)
        return vol

    @property
    def coefficients(self) -> np.ndarray:
        return np.exp(self.log_coef)

    def centers(self, axis: int = 0) -> np.ndarray:
        e = self.edges[axis]
        return 0.5 * (e[:-1] + e[1:])

    def _coords(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if self.axes is not None:
            x = x[:, list(self.axes)]
        if x.shape[1] != self.ndim:
            raise ValueError(f"histogram expects {self.ndim} coordinates, got {x.shape[1]}")
        return x

    def cell_index(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Per-axis cell indices and a mask of points inside the partition.

        Cells are closed on the left; the last cell on each axis also
        contains its right boundary.
        """
        x = self._coords(x)
        idx = []
        inside = np.ones(x.shape[0], dtype=bool)
        for a, e in enumerate(self.edges):
            i = np.searchsorted(e, x[:, a], side="right") - 1
            i = np.where(x[:, a] == e[-1], e.size - 2, i)
            inside &= (i >= 0) & (i < e.size - 1)
            idx.append(np.clip(i, 0, e.size - 2))
        return tuple(idx), inside

    def log_evaluate(self, x) -> np.ndarray:
        idx, inside = self.cell_index(x)
        if self.outside == "nearest":
            return self.log_coef[idx]  # indices are already clipped to the edge cells
        return np.where(inside, self.log_coef[idx], self.log_fallback)

    def evaluate(self, x) -> np.ndarray:
        return np.exp(self.log_evaluate(x))

    def __call__(self, t: int, view: StateView) -> np.ndarray:
        return self.log_evaluate(_select(view, self.argument))


def weighted_histogram(
    coords: np.ndarray,
    log_weights: np.ndarray,
    edges: Sequence[np.ndarray],
    normalizer: str,
    total: int | None = None,
    empty: str = "zero",
    argument: str = "state",
    axes: tuple | None = None,
    outside: str = "fallback",
) -> HistogramEstimator:
    """Accumulate pilot weights into cells.

    Parameters
    ----------
    coords : ndarray, shape (m, k)
        Binned coordinates of each pilot.
    log_weights : ndarray, shape (m,)
    edges : sequence of ndarray
    normalizer : {"count", "volume"}
        ``"count"`` divides each cell sum by the number of pilots in the
        cell (a conditional mean); ``"volume"`` divides by ``total * |X_d|``
        (a density-scale estimate).
    empty : {"zero", "min"}
        Value for cells with zero pilot mass and for points outside the
        partition: ``"zero"`` gives 0; ``"min"`` gives 0.01 times the
        smallest positive cell value.
    outside : {"fallback", "nearest"}
        See :class:`HistogramEstimator`.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    edges = tuple(np.asarray(e, dtype=float) for e in edges)
    shape = tuple(e.size - 1 for e in edges)
    probe = HistogramEstimator(edges, np.zeros(shape), 0.0, np.zeros(shape, dtype=np.int64))
    idx, inside = probe.cell_index(coords)
    flat = np.ravel_multi_index(idx, shape)
    ncell = int(np.prod(shape))
    lw = np.asarray(log_weights, dtype=float)
    counts = np.bincount(flat[inside], minlength=ncell)
    # log-sum per cell with a shared shift, accumulated in fixed cell order
    alive = inside & np.isfinite(lw)
    shift = np.max(lw[alive]) if np.any(alive) else 0.0
    sums = np.bincount(flat[alive], weights=np.exp(lw[alive] - shift), minlength=ncell)
    with np.errstate(divide="ignore"):
        log_sum = np.log(sums) + shift
    if normalizer == "count":
        with np.errstate(divide="ignore"):
            log_coef = log_sum - np.log(np.maximum(counts, 1))
    elif normalizer == "volume":
        if total is None:
            raise ValueError("volume normalisation needs the total pilot count")
        log_coef = log_sum - np.log(total) - np.log(probe.cell_volumes.ravel())
    else:
        raise ValueError(f"unknown normalizer {normalizer!r}")
    positive = np.isfinite(log_coef)
    if empty == "min" and np.any(positive):
        log_fallback = float(np.min(log_coef[positive]) + np.log(0.01))
    else:
        log_fallback = -np.inf
    log_coef = np.where(positive, log_coef, log_fallback)
    return HistogramEstimator(
        edges, log_coef.reshape(shape), log_fallback, counts.reshape(shape), argument, axes, outside
    )


# ---------------------------------------------------------------------------
# Estimator sets
# ---------------------------------------------------------------------------


class PriorityEstimatorSet:
    """Per-time evaluators of ``log p_hat(I_{t+1:t+} | x_{0:t})``.

    Parameters
    ----------
    schedule : ConstraintSchedule
    per_time : mapping or callable
        ``per_time[t](t, view) -> log p_hat`` per particle, or one callable
        used for every time.
    kind : str
        Free-form label recorded in reports.
    """

    def __init__(self, schedule: ConstraintSchedule, per_time, kind: str = "custom", info: dict | None = None):
        self.schedule = schedule
        self.kind = kind
        self.info = dict(info or {})
        if callable(per_time) and not isinstance(per_time, Mapping):
            self._fn = per_time
            self.per_time: dict = {}
        else:
            self._fn = None
            self.per_time = dict(per_time)
        self.nonfinite = 0

    def needs_estimate(self, t: int) -> bool:
        return self.schedule.t_plus(t) > t

    def covers(self, t: int) -> bool:
        return not self.needs_estimate(t) or self._fn is not None or t in self.per_time

    def evaluator(self, t: int):
        if self._fn is not None:
            return self._fn
        try:
            return self.per_time[t]
        except KeyError:
            raise ConfigurationError(f"no priority estimator for t={t} (next strong time {self.schedule.t_plus(t)})")

    def log_priority(self, t: int, view: StateView) -> np.ndarray:
        """``log p_hat`` per particle; exactly 0 when no strong constraint lies ahead.

        Non-finite values other than ``-inf`` are mapped to ``-inf`` (an
        estimate of zero) and counted in :attr:`nonfinite`.
        """
        n = len(view)
        if not self.needs_estimate(t):
            return np.zeros(n)
        out = np.asarray(self.evaluator(t)(t, view), dtype=float).reshape(n)
        bad = np.isnan(out) | (out == np.inf)
        if np.any(bad):
            self.nonfinite += int(bad.sum())
            out = np.where(bad, -np.inf, out)
        return out

    def priority(self, t: int, view: StateView) -> np.ndarray:
        return np.exp(self.log_priority(t, view))

    def scaled(self, factor: float) -> "PriorityEstimatorSet":
        """Same estimator multiplied by a positive constant."""
        if not factor > 0:
            raise ValueError("scale factor must be positive")
        shift = float(np.log(factor))
        if self._fn is not None:
            fn = self._fn
            return PriorityEstimatorSet(self.schedule, lambda t, v: fn(t, v) + shift, self.kind, self.info)
        per = {t: (lambda t_, v, f=f: f(t_, v) + shift) for t, f in self.per_time.items()}
        return PriorityEstimatorSet(self.schedule, per, self.kind, self.info)


def parametric_priority(schedule: ConstraintSchedule, form: Callable, argument: str = "state", log: bool = False):
    """Wrap a user closed form ``form(t, arg)`` as an estimator set.

    ``arg`` is the current state, the summary statistic or the full prefix as
    selected by ``argument``.  ``form`` returns probabilities, or log
    probabilities when ``log=True``.
    """
    if argument not in ARGUMENTS:
        raise ValueError(f"argument must be one of {ARGUMENTS}")

    def evaluate(t, view):
        val = np.asarray(form(t, _select(view, argument)), dtype=float)
        if log:
            return val
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(val >= 0, np.log(np.where(val >= 0, val, 1.0)), np.nan)

    return PriorityEstimatorSet(schedule, evaluate, kind="parametric")


def constant_priority(schedule: ConstraintSchedule, value: float = 1.0) -> PriorityEstimatorSet:
    lv = float(np.log(value))
    return PriorityEstimatorSet(schedule, lambda t, view: np.full(len(view), lv), kind="constant")


def heatmap_export(estimators: PriorityEstimatorSet, times: Sequence[int], grid) -> np.ndarray:
    """Evaluate ``p_hat`` on a ``(time, state)`` grid for scalar states.

    Returns a matrix of shape ``(len(times), len(grid))``.
    """
    grid = np.asarray(grid, dtype=float)
    out = np.empty((len(times), grid.size))
    for i, t in enumerate(times):
        view = StateView(grid[:, None], stats=grid[:, None])
        out[i] = estimators.priority(int(t), view)
    return out


# ---------------------------------------------------------------------------
# Portable text format for histogram sets
# ---------------------------------------------------------------------------

_HEADER = ["t", "cell", "argument", "axes", "lower", "upper", "log_value", "count"]


def _fmt(x: float) -> str:
    return repr(float(x))


def histograms_to_csv(estimators: PriorityEstimatorSet) -> str:
    """Serialise a set of histogram estimators as columnar text.

    One row per cell (``cell >= 0``) plus one fallback row (``cell = -1``)
    per time.  ``lower`` and ``upper`` list the cell bounds per axis
    separated by ``;``; on the fallback row ``lower`` holds the outside rule.
    """
    if estimators._fn is not None:
        raise TypeError(f"a {estimators.kind!r} estimator set is a function, not histograms, and cannot be serialised")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_HEADER)
    for t in sorted(estimators.per_time):
        h = estimators.per_time[t]
        if not isinstance(h, HistogramEstimator):
            raise TypeError(f"estimator at t={t} is not a histogram and cannot be serialised")
        axes = "" if h.axes is None else ";".join(str(a) for a in h.axes)
        writer.writerow([t, -1, h.argument, axes, h.outside, "", _fmt(h.log_fallback), 0])
        shape = h.log_coef.shape
        for flat in range(int(np.prod(shape))):
            multi = np.unravel_index(flat, shape)
            lo = ";".join(_fmt(h.edges[a][i]) for a, i in enumerate(multi))
            hi = ";".join(_fmt(h.edges[a][i + 1]) for a, i in enumerate(multi))
            writer.writerow([t, flat, h.argument, axes, lo, hi, _fmt(h.log_coef[multi]), int(h.counts[multi])])
    return buf.getvalue()


def histograms_from_csv(text: str, schedule: ConstraintSchedule, kind: str = "histogram") -> PriorityEstimatorSet:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and list(rows[0].keys()) != _HEADER:
        raise ValueError(f"unexpected columns {list(rows[0].keys())}")
    by_t: dict[int, list] = {}
    for r in rows:
        by_t.setdefault(int(r["t"]), []).append(r)
    per_time = {}
    for t, rs in by_t.items():
        fb = [r for r in rs if int(r["cell"]) == -1]
        cells = sorted((r for r in rs if int(r["cell"]) >= 0), key=lambda r: int(r["cell"]))
        if len(fb) != 1 or not cells:
            raise ValueError(f"malformed histogram block for t={t}")
        lows = np.array([[float(v) for v in r["lower"].split(";")] for r in cells])
        highs = np.array([[float(v) for v in r["upper"].split(";")] for r in cells])
        k = lows.shape[1]
        edges = []
        for a in range(k):
            e = np.unique(np.concatenate([lows[:, a], highs[:, a]]))
            edges.append(e)
        shape = tuple(e.size - 1 for e in edges)
        log_coef = np.array([float(r["log_value"]) for r in cells]).reshape(shape)
        counts = np.array([int(r["count"]) for r in cells], dtype=np.int64).reshape(shape)
        axes = fb[0]["axes"]
        per_time[t] = HistogramEstimator(
            tuple(edges),
            log_coef,
            float(fb[0]["log_value"]),
            counts,
            fb[0]["argument"],
            tuple(int(a) for a in axes.split(";")) if axes else None,
            fb[0]["lower"] or "fallback",
        )
    return PriorityEstimatorSet(schedule, per_time, kind=kind)
