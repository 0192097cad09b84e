"""Priority scores from pilots run forward in time.

Each pilot accumulates incremental weights ``u_s = p * p(I_s) / g``; the
product over the rest of the segment, ``U_t = prod_{s=t+1}^{T_k} u_s``, has
conditional mean ``p(I_{t+1:T_k} | S_t)`` when the forward kernel and the
constraint likelihoods depend on the past only through the summary ``S``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import logsumexp

from csmc.errors import ConfigurationError, EstimatorDegenerateError
from csmc.model import BootstrapProposal, ConstraintSchedule, DynamicModel, Prefix, Proposal, constraint_aware
from csmc.particles import incremental_weight
from csmc.priority.backward import _partition_fn, strong_segments
from csmc.priority.base import PriorityEstimatorSet, StateView, weighted_histogram
from csmc.streams import Streams, as_streams


def _summary_of(model, last, stats):
    return stats if model.has_summary else last


def simulate_pilots(
    model: DynamicModel,
    schedule: ConstraintSchedule,
    proposal: Proposal,
    x: np.ndarray,
    stats: np.ndarray | None,
    start: int,
    stop: int,
    rng_for: Callable[[int], np.random.Generator],
    paths: np.ndarray | None = None,
):
    """Propagate pilots from ``start`` to ``stop`` and record each step.

    Returns ``(states, summaries, log_u)`` where ``states[s - start]`` is the
    pilot state at time ``s`` and ``log_u[s - start - 1]`` the incremental
    log-weight of step ``s``.
    """
    needs_paths = not model.markov and not model.has_summary
    states = [x]
    summaries = [stats]
    log_u = []
    for s in range(start + 1, stop + 1):
        prefix = Prefix(x, stats, paths if needs_paths else None)
        x_new, logq = proposal.propose(s, prefix, rng_for(s))
        log_u.append(incremental_weight(model, schedule, s, prefix, x_new, logq))
        if model.has_summary:
            stats = model.summary_update(s, stats, x_new)
        if needs_paths:
            paths = np.concatenate([paths, x_new[:, None, :]], axis=1)
        x = x_new
        states.append(x)
        summaries.append(stats)
    return states, summaries, log_u


def _default_initial(model, schedule, proposal, lo, m, rng_for):
    """Start pilots at ``lo`` by running the model forward without constraints."""
    free = BootstrapProposal(model)
    x, _ = free.propose_initial(m, rng_for(0))
    stats = model.summary_init(x) if model.has_summary else None
    paths = x[:, None, :]
    for s in range(1, lo + 1):
        x = model.sample_forward(s, Prefix(x, stats, paths if not model.markov else None), rng_for(s))
        if model.has_summary:
            stats = model.summary_update(s, stats, x)
        if not model.markov:
            paths = np.concatenate([paths, x[:, None, :]], axis=1)
    return x, stats, (None if model.markov else paths)


def forward_pilot_smoothing(
    model: DynamicModel,
    schedule: ConstraintSchedule,
    m: int,
    rng: Streams | int | None = None,
    proposal: Proposal | None = None,
    initial: Callable | None = None,
    partition="auto",
    cells: int = 50,
    axes: tuple | None = None,
    outside: str = "fallback",
) -> PriorityEstimatorSet:
    """Histogram estimators of ``p(I_{t+1:t+} | S_t)`` from forward pilots.

    Parameters
    ----------
    model : DynamicModel
        Its summary statistic (or the state, for models without one) is the
        binned coordinate.
    schedule : ConstraintSchedule
    m : int
        Pilots per segment.
    proposal : Proposal, optional
        Pilot proposal ``g``; defaults to the model itself.  It is made
        constraint-aware so that pilots hit the segment-ending constraint.
    initial : callable, optional
        ``initial(lo, m, rng) -> (x, stats)`` draws pilot starting points at
        the segment start ``lo``.  Defaults to running the model forward
        unconstrained from time 0.
    partition, cells
        Per-time partition of the binned coordinate (see
        :func:`csmc.priority.backward.backward_pilot_smoothing`).
    axes : tuple of int, optional
        Columns of the summary to bin on.
    outside : {"fallback", "nearest"}
        Value beyond the pilot range: the fallback, or the nearest edge cell.
    """
    if m < 1:
        raise ValueError("need at least one pilot")
    streams = as_streams(rng).child("forward-pilots")
    proposal = constraint_aware(proposal or BootstrapProposal(model), model, schedule)
    make_edges = _partition_fn(partition, cells)
    argument = "summary" if model.has_summary else "state"
    per_time = {}
    for k, (first, lo, hi) in enumerate(strong_segments(schedule)):
        seg = streams.child(k)
        if initial is not None:
            x, stats = initial(lo, m, seg.generator("initial"))
            paths = None
        elif lo == 0:
            x, logq = proposal.propose_initial(m, seg.generator("initial"))
            stats = model.summary_init(x) if model.has_summary else None
            paths = x[:, None, :]
        else:
            x, stats, paths = _default_initial(model, schedule, proposal, lo, m, lambda s: seg.generator("warmup", s))
        if not model.markov and not model.has_summary and paths is None:
            raise ConfigurationError("forward pilots for a path-dependent model need full starting paths")
        states, summaries, log_u = simulate_pilots(
            model, schedule, proposal, x, stats, lo, hi, lambda s: seg.generator("step", s), paths
        )
        # log U_t = sum_{s=t+1}^{hi} log u_s, a reversed cumulative sum
        tail = np.zeros(m)
        log_U = {hi: tail}
        for s in range(hi, lo, -1):
            tail = tail + log_u[s - lo - 1]
            log_U[s - 1] = tail
        if not np.any(np.isfinite(log_U[first])):
            raise EstimatorDegenerateError((lo, hi), "every forward pilot violates the segment constraint")
        for t in range(first, hi):
            coords = _summary_of(model, states[t - lo], summaries[t - lo])
            if axes is not None:
                coords = coords[:, list(axes)]
            edges = [make_edges(t, coords[:, a]) for a in range(coords.shape[1])]
            per_time[t] = weighted_histogram(
                coords, log_U[t], edges, normalizer="count", empty="min", argument=argument, axes=axes,
                outside=outside,
            )
    return PriorityEstimatorSet(schedule, per_time, kind="forward-pilot", info={"m": m})


class PerPathPilots:
    """``J`` forward pilots launched from every particle at scoring time.

    The estimate for particle ``i`` is ``(1/J) sum_j U_t^{(i,j)}``.  Random
    numbers come from the view's streams, so results are reproducible.
    """

    def __init__(self, model: DynamicModel, schedule: ConstraintSchedule, J: int, proposal: Proposal | None = None):
        if J < 1:
            raise ValueError("need at least one pilot per particle")
        self.model = model
        self.schedule = schedule
        self.J = J
        self.proposal = constraint_aware(proposal or BootstrapProposal(model), model, schedule)

    def __call__(self, t: int, view: StateView) -> np.ndarray:
        n = len(view)
        stop = self.schedule.t_plus(t)
        if stop == t:
            return np.zeros(n)
        streams = view.streams if view.streams is not None else Streams(0, ("per-path", t))
        rep = np.repeat(np.arange(n), self.J)
        x = view.current[rep]
        stats = None if view.stats is None else view.stats[rep]
        paths = None
        if not self.model.markov and not self.model.has_summary:
            paths = view.paths[rep]
        _, _, log_u = simulate_pilots(
            self.model, self.schedule, self.proposal, x, stats, t, stop, lambda s: streams.generator("pilot", s), paths
        )
        log_U = np.sum(log_u, axis=0).reshape(n, self.J)
        return logsumexp(log_U, axis=1) - np.log(self.J)


def per_path_forward_pilots(
    model: DynamicModel, schedule: ConstraintSchedule, J: int, proposal: Proposal | None = None
) -> PriorityEstimatorSet:
    """Estimator set that sends ``J`` fresh pilots from each particle when scored."""
    return PriorityEstimatorSet(schedule, PerPathPilots(model, schedule, J, proposal), kind="per-path-pilot")


def per_path_estimates(model, schedule, t: int, view: StateView, J: int, proposal=None) -> np.ndarray:
    """``p_hat(I_{t+1:t+} | x_{0:t}^{(i)})`` for each particle of ``view`` (linear scale)."""
    return np.exp(PerPathPilots(model, schedule, J, proposal)(t, view))
