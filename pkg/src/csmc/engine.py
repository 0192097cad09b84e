"""Sequential sampler with priority-score resampling, plus baseline samplers.

At each time ``t`` every particle draws ``x_t ~ q`` and multiplies its weight
by ``p(x_t | x_{0:t-1}) p(I_t | x_t) / q(x_t | x_{0:t-1})``.  When the policy
triggers, particles are resampled with probabilities proportional to the
priority score ``beta = w * p_hat(I_{t+1:t+} | x_{0:t})`` and each copy is
given weight ``w / beta``.  The weights therefore always target the
constrained path law itself; the estimator only steers where particles go.

Propagation runs over fixed-size particle blocks, each drawing from its own
random stream keyed by ``(time, block)``; resampling and the ESS are computed
on the gathered ensemble.  Results depend on the master seed and the block
size only, never on the number of worker threads.
"""

from __future__ import annotations

import logging
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from csmc.errors import ConfigurationError, RejectionError, WeightCollapseError
from csmc.model import (
    BootstrapProposal,
    ConstraintSchedule,
    DynamicModel,
    FixedPoint,
    Observation,
    Prefix,
    Proposal,
    Subset,
    Trivial,
    constraint_aware,
)
from csmc.particles import ParticleEnsemble, incremental_weight, log_ess, resample_indices
from csmc.priority.base import PriorityEstimatorSet, StateView
from csmc.streams import Streams, as_streams

log = logging.getLogger(__name__)

FLOOR = 1e-12
DEFAULT_BLOCK = 1024

# ---------------------------------------------------------------------------
# Policy and report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResamplingPolicy:
    """When to resample and which scores to resample with.

    Parameters
    ----------
    mode : {"never", "every", "ess"}
    k : int
        Period for ``mode="every"``: resample at ``t = k, 2k, ...``.
    fraction : float
        Threshold for ``mode="ess"``: resample when ``ESS < fraction * n``.
    scores : {"weight", "estimator"}
        ``"weight"`` resamples with ``beta = w``; ``"estimator"`` with
        ``beta = w * p_hat``.
    scheme : {"multinomial", "stratified"}
    """

    mode: str = "ess"
    k: int = 1
    fraction: float = 0.3
    scores: str = "estimator"
    scheme: str = "multinomial"

    def __post_init__(self):
        if self.mode not in ("never", "every", "ess"):
            raise ValueError(f"unknown resampling mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("resampling period k must be >= 1")
        if not 0 < self.fraction <= 1:
            raise ValueError("ESS fraction must lie in (0, 1]")
        if self.scores not in ("weight", "estimator"):
            raise ValueError(f"unknown score source {self.scores!r}")

    @classmethod
    def never(cls) -> "ResamplingPolicy":
        return cls(mode="never", scores="weight")

    @classmethod
    def every(cls, k: int, scores: str = "estimator") -> "ResamplingPolicy":
        return cls(mode="every", k=k, scores=scores)

    @classmethod
    def ess(cls, fraction: float = 0.3, scores: str = "estimator") -> "ResamplingPolicy":
        return cls(mode="ess", fraction=fraction, scores=scores)

    def scheduled(self, t: int) -> bool:
        # t=0 is never a scheduled time, so k > T means no resampling at all
        return self.mode == "every" and t > 0 and t % self.k == 0


@dataclass
class RunReport:
    """Outcome of one sampler run.

    ``ess[t]`` is the ESS of the priority scores where they were formed
    (``scored[t]``) and of the weights otherwise; entries before the run's
    start time are ``nan``.
    """

    ensemble: ParticleEnsemble
    ess: np.ndarray
    scored: np.ndarray
    resample_times: list
    score_summary: list
    killed: np.ndarray
    nonfinite_scores: int = 0
    floored: int = 0
    wall_time: float = 0.0
    seed: int | None = None
    key: tuple = ()
    n: int = 0
    attempts: int | None = None
    accepted: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float | None:
        if self.attempts is None:
            return None
        return self.accepted / self.attempts

    @property
    def final_ess(self) -> float:
        return float(np.exp(log_ess(self.ensemble.log_weights)))

    def summary(self) -> dict:
        out = {
            "n": self.n,
            "survivors": self.ensemble.n,
            "final_ess": self.final_ess,
            "resample_times": [int(t) for t in self.resample_times],
            "ess": [None if np.isnan(v) else float(v) for v in self.ess],
            "killed": [int(k) for k in self.killed],
            "nonfinite_scores": self.nonfinite_scores,
            "floored_scores": self.floored,
            "wall_time": self.wall_time,
            "seed": self.seed,
        }
        if self.attempts is not None:
            out.update(attempts=self.attempts, accepted=self.accepted, acceptance_rate=self.acceptance_rate)
        return out


# ---------------------------------------------------------------------------
# Internal state: per-time states with ancestor links
# ---------------------------------------------------------------------------


class _History:
    """States per time plus parent indices; paths are rebuilt on demand."""

    def __init__(self, start: int, x: np.ndarray, prior_paths: np.ndarray | None = None):
        self.start = start
        self.states = {start: x}
        self.parents: dict[int, np.ndarray] = {}
        self.prior = prior_paths  # (n, start, d) fixed prefix rows, or None

    def push(self, t, x, parents):
        self.states[t] = x
        self.parents[t] = parents

    def reorder(self, t, idx):
        self.states[t] = self.states[t][idx]
        if t in self.parents:
            self.parents[t] = self.parents[t][idx]
        else:
            self.base = getattr(self, "base", np.arange(len(idx)))[idx]

    def paths(self, t: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Full paths up to ``t`` and the starting row of each particle."""
        t = max(self.states) if t is None else t
        x = self.states[t]
        n, d = x.shape
        out = np.empty((n, t - self.start + 1, d))
        row = np.arange(n)
        for s in range(t, self.start, -1):
            out[:, s - self.start] = self.states[s][row]
            row = self.parents[s][row]
        out[:, 0] = self.states[self.start][row]
        base = getattr(self, "base", np.arange(self.states[self.start].shape[0]))[row]
        if self.prior is not None:
            out = np.concatenate([self.prior[base], out], axis=1)
        return out, base


def _blocks(n, size):
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _prefix(model, hist, t, stats, lo, hi):
    last = hist.states[t - 1][lo:hi]
    st = None if stats is None else stats[lo:hi]
    paths = None
    if not model.markov and not model.has_summary:
        paths = hist.paths(t - 1)[0][lo:hi]
    return Prefix(last, st, paths)


def _apply_floor(log_phat, alive):
    """Floor ``p_hat`` at ``FLOOR`` times its maximum over living particles."""
    if not np.any(alive):
        return log_phat, 0
    top = np.max(log_phat[alive])
    if top == -np.inf:
        # the estimator rules out every particle: fall back to weights only
        return np.zeros_like(log_phat), int(alive.sum())
    floor = top + np.log(FLOOR)
    low = alive & (log_phat < floor)
    return np.where(low, floor, log_phat), int(low.sum())


def _run(
    model: DynamicModel,
    schedule: ConstraintSchedule,
    proposal: Proposal | None,
    estimators: PriorityEstimatorSet | None,
    policy: ResamplingPolicy,
    n: int,
    rng,
    start: int = 0,
    stop: int | None = None,
    initial: ParticleEnsemble | None = None,
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
    checkpoints: dict | None = None,
    on_checkpoint: Callable | None = None,
):
    streams = as_streams(rng)
    T = schedule.horizon
    stop = T if stop is None else stop
    proposal = constraint_aware(proposal or BootstrapProposal(model), model, schedule)
    if policy.scores == "estimator" and estimators is None:
        raise ConfigurationError("policy resamples with estimator scores but no estimator set was given")
    if estimators is not None and policy.scores == "estimator" and policy.mode != "never":
        missing = [t for t in range(start, min(stop, T)) if estimators.needs_estimate(t) and not estimators.covers(t)]
        if policy.mode == "every":
            missing = [t for t in missing if policy.scheduled(t)]
        if missing:
            raise ConfigurationError(f"priority estimator missing at t={missing[0]}")
    clock = _time.perf_counter()
    ess_trace = np.full(T + 1, np.nan)
    scored = np.zeros(T + 1, dtype=bool)
    killed = np.zeros(T + 1, dtype=np.int64)
    resample_times: list[int] = []
    summary: list[dict] = []
    floored = 0
    nonfinite0 = estimators.nonfinite if estimators is not None else 0

    if initial is None:
        if start != 0:
            raise ValueError("a run starting after t=0 needs an initial ensemble")
        blocks = _blocks(n, block_size)

        def init_block(b):
            lo, hi = b
            x, logq = proposal.propose_initial(hi - lo, streams.generator("init", lo // block_size))
            return x, incremental_weight(model, schedule, 0, None, x, logq)

        parts = _map(init_block, blocks, workers)
        x = np.concatenate([p[0] for p in parts])
        lw = np.concatenate([p[1] for p in parts])
        scale = 0.0
        stats = model.summary_init(x) if model.has_summary else None
        hist = _History(0, x)
        killed[0] = int(np.sum(lw == -np.inf))
        t0 = 0
    else:
        if initial.time != start:
            raise ValueError(f"initial ensemble is at t={initial.time}, run starts at t={start}")
        n = initial.n
        blocks = _blocks(n, block_size)
        x = initial.current.copy()
        lw = initial.log_weights.copy()
        scale = initial.log_weight_scale
        if initial.stats is not None:
            stats = initial.stats.copy()
        else:
            stats = model.summary(initial.paths) if model.has_summary else None
        hist = _History(start, x, initial.paths[:, :-1] if start > 0 else None)
        t0 = start

    def finish_step(t, lw, scale, stats):
        alive = np.isfinite(lw)
        if not np.any(alive):
            raise WeightCollapseError(t)
        top = np.max(lw)
        return lw - top, scale + float(top)

    lw, scale = finish_step(t0, lw, scale, stats)

    for t in range(t0, stop + 1):
        if t > t0:
            prev_dead = lw == -np.inf

            def step_block(b, t=t, stats=stats):
                lo, hi = b
                prefix = _prefix(model, hist, t, stats, lo, hi)
                xb, logq = proposal.propose(t, prefix, streams.generator("propagate", t, lo // block_size))
                inc = incremental_weight(model, schedule, t, prefix, xb, logq)
                sb = model.summary_update(t, prefix.stats, xb) if model.has_summary else None
                return xb, inc, sb

            parts = _map(step_block, blocks, workers)
            x = np.concatenate([p[0] for p in parts])
            lw = lw + np.concatenate([p[1] for p in parts])
            if model.has_summary:
                stats = np.concatenate([p[2] for p in parts])
            hist.push(t, x, np.arange(n))
            killed[t] = int(np.sum((lw == -np.inf) & ~prev_dead))
            lw, scale = finish_step(t, lw, scale, stats)

        if t == t0 and initial is not None:
            # the handed-over ensemble already went through its decision at t0
            continue
        # resampling decision (never at the final time of the horizon)
        alive = np.isfinite(lw)
        use_est = policy.scores == "estimator" and estimators is not None and estimators.needs_estimate(t)
        want_score = policy.mode == "ess" or (policy.mode == "every" and policy.scheduled(t))
        if use_est and want_score and t < T:
            view = StateView(
                hist.states[t], stats, (lambda t=t: hist.paths(t)[0]), streams.child("score", t)
            )
            log_phat = estimators.log_priority(t, view)
            log_phat, nf = _apply_floor(log_phat, alive)
            floored += nf
            log_beta = lw + log_phat
            scored[t] = True
        else:
            log_phat = None
            log_beta = lw
        ess_t = float(np.exp(log_ess(log_beta)))
        ess_trace[t] = ess_t
        # a segment's last time still takes its decision; the next segment skips it
        do = t < T and (
            (policy.mode == "every" and policy.scheduled(t)) or (policy.mode == "ess" and ess_t < policy.fraction * n)
        )
        if log_phat is not None or do:
            summary.append(
                {
                    "t": t,
                    "ess": ess_t,
                    "resampled": bool(do),
                    "log_phat_min": None if log_phat is None else float(np.min(log_phat[alive])),
                    "log_phat_max": None if log_phat is None else float(np.max(log_phat[alive])),
                }
            )
        if do:
            idx = resample_indices(log_beta, n, policy.scheme, streams.generator("resample", t))
            lw = lw[idx] - log_beta[idx]
            hist.reorder(t, idx)
            if stats is not None:
                stats = stats[idx]
            lw, scale = finish_step(t, lw, scale, stats)
            resample_times.append(t)
            log.debug("t=%d resampled (ESS %.1f)", t, ess_t)

        if checkpoints is not None and t in checkpoints and on_checkpoint is not None:
            on_checkpoint(checkpoints[t], _ensemble(hist, lw, scale, stats, t, drop=False))

    ens = _ensemble(hist, lw, scale, stats, stop, drop=True)
    report = RunReport(
        ensemble=ens,
        ess=ess_trace,
        scored=scored,
        resample_times=resample_times,
        score_summary=summary,
        killed=killed,
        nonfinite_scores=(estimators.nonfinite - nonfinite0) if estimators is not None else 0,
        floored=floored,
        wall_time=_time.perf_counter() - clock,
        seed=streams.seed,
        key=streams.key,
        n=n,
    )
    if stop < T:
        report.extra["full"] = _ensemble(hist, lw, scale, stats, stop, drop=False)
    return report


def _ensemble(hist, lw, scale, stats, t, drop):
    paths, base = hist.paths(t)
    keep = np.isfinite(lw) if drop else np.ones(lw.size, dtype=bool)
    return ParticleEnsemble(
        paths[keep],
        lw[keep],
        scale,
        None if stats is None else stats[keep],
        base[keep],
    )


# ---------------------------------------------------------------------------
# Public drivers
# ---------------------------------------------------------------------------


def run_csmc(
    model: DynamicModel,
    schedule: ConstraintSchedule,
    proposal: Proposal | None = None,
    estimators: PriorityEstimatorSet | None = None,
    policy: ResamplingPolicy | None = None,
    n: int = 1000,
    rng: Streams | int | None = None,
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
    initial: ParticleEnsemble | None = None,
    start: int = 0,
    stop: int | None = None,
) -> RunReport:
    """Run the constrained sampler over ``start..stop`` (default the whole horizon).

    Parameters
    ----------
    model, schedule : the system
    proposal : Proposal, optional
        Defaults to the model's own kernel; always wrapped so that fixed
        points and bounded subsets are hit exactly.
    estimators : PriorityEstimatorSet, optional
        Required when ``policy.scores == "estimator"``.
    policy : ResamplingPolicy
        Defaults to ``ESS < 0.3 n`` with estimator scores (weight scores if
        no estimator is given).
    n : int
        Number of particles (ignored when ``initial`` is given).
    rng : Streams, int or None
    block_size : int
        Particles per random stream; part of the reproducibility contract.
    workers : int
        Threads used for propagation; does not change results.

    Raises
    ------
    WeightCollapseError
        If every particle is killed; carries the time.
    ConfigurationError
        If an estimator is missing at a time the policy may resample.
    """
    if policy is None:
        policy = ResamplingPolicy.ess(0.3, "estimator" if estimators is not None else "weight")
    if initial is None and n < 1:
        raise ValueError("need at least one particle")
    return _run(model, schedule, proposal, estimators, policy, n, rng, start, stop, initial, block_size, workers)


def run_segmental(
    model: DynamicModel,
    schedule: ConstraintSchedule,
    proposal: Proposal | None = None,
    estimators: PriorityEstimatorSet | None = None,
    policy: ResamplingPolicy | None = None,
    n: int = 1000,
    rng: Streams | int | None = None,
    on_segment: Callable[[tuple[int, int], ParticleEnsemble], None] | None = None,
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
) -> RunReport:
    """Run segment by segment between strong times, handing each segment's
    ensemble to the next.

    ``on_segment((lo, hi), ensemble)`` is called at each segment end (killed
    particles included, with weight zero), e.g. to checkpoint to disk.  Random
    streams are keyed by absolute time, so the result equals
    :func:`run_csmc` with the same seed.
    """
    if not schedule.strong_times:
        raise ConfigurationError("segmental sampling needs at least one strong time")
    if policy is None:
        policy = ResamplingPolicy.ess(0.3, "estimator" if estimators is not None else "weight")
    streams = as_streams(rng)
    segments = schedule.segments()
    if segments[-1][1] < schedule.horizon:
        segments.append((segments[-1][1], schedule.horizon))
    ens = None
    reports = []
    for lo, hi in segments:
        rep = _run(
            model, schedule, proposal, estimators, policy, n, streams, lo, hi,
            ens, block_size, workers, {hi: (lo, hi)}, on_segment,
        )
        reports.append(rep)
        # carry killed particles too so that the next segment sees all n rows
        ens = rep.extra.get("full", rep.ensemble)
    return _merge(reports, schedule.horizon)


def _merge(reports: list[RunReport], T: int) -> RunReport:
    last = reports[-1]
    ess = np.full(T + 1, np.nan)
    scored = np.zeros(T + 1, dtype=bool)
    killed = np.zeros(T + 1, dtype=np.int64)
    times, summary = [], []
    for r in reports:
        mask = ~np.isnan(r.ess)
        ess[mask] = r.ess[mask]
        scored |= r.scored
        killed += r.killed
        times += [t for t in r.resample_times if t not in times]
        summary += r.score_summary
    return RunReport(
        ensemble=last.ensemble,
        ess=ess,
        scored=scored,
        resample_times=sorted(times),
        score_summary=summary,
        killed=killed,
        nonfinite_scores=sum(r.nonfinite_scores for r in reports),
        floored=sum(r.floored for r in reports),
        wall_time=sum(r.wall_time for r in reports),
        seed=last.seed,
        key=last.key,
        n=reports[0].n,
    )


def run_drifted_smc(
    model: DynamicModel,
    schedule: ConstraintSchedule,
    drift_proposal: Proposal,
    n: int = 1000,
    rng: Streams | int | None = None,
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
) -> RunReport:
    """Importance sampling with a drifted kernel and no resampling."""
    return _run(model, schedule, drift_proposal, None, ResamplingPolicy.never(), n, rng, block_size=block_size,
                workers=workers)


def _hard_mask(schedule: ConstraintSchedule, t: int, x: np.ndarray) -> np.ndarray:
    c = schedule[t]
    if isinstance(c, Trivial):
        return np.ones(x.shape[0], dtype=bool)
    if isinstance(c, (Subset, FixedPoint)):
        return np.isfinite(c.log_likelihood(x))
    raise ConfigurationError(f"rejection sampling cannot enforce a {type(c).__name__} constraint at t={t}")


def run_rejection(
    model: DynamicModel,
    schedule: ConstraintSchedule,
    n_target: int | None = None,
    max_attempts: int = 10**6,
    rng: Streams | int | None = None,
    batch: int = 50_000,
    keep_paths: bool = True,
) -> RunReport:
    """Simulate unconstrained paths and keep those meeting every hard constraint.

    Stops after ``n_target`` acceptances or ``max_attempts`` attempts,
    whichever comes first (``n_target=None`` always uses every attempt).
    Accepted paths carry equal weights.

    Raises
    ------
    RejectionError
        If nothing is accepted.
    """
    if any(isinstance(c, Observation) for c in schedule.descriptors):
        raise ConfigurationError("rejection sampling supports subset and fixed-point constraints only")
    streams = as_streams(rng).child("rejection")
    clock = _time.perf_counter()
    T = schedule.horizon
    kept, kept_stats = [], []
    attempts = accepted = 0
    b = 0
    while attempts < max_attempts and (n_target is None or accepted < n_target):
        size = min(batch, max_attempts - attempts)
        gen = streams.generator(b)
        x = model.sample_initial(size, gen)
        ok = _hard_mask(schedule, 0, x)
        stats = model.summary_init(x) if model.has_summary else None
        paths = [x]
        for t in range(1, T + 1):
            needs_paths = not model.markov and not model.has_summary
            prefix = Prefix(x, stats, np.stack(paths, axis=1) if needs_paths else None)
            x = model.sample_forward(t, prefix, gen)
            if model.has_summary:
                stats = model.summary_update(t, stats, x)
            ok &= _hard_mask(schedule, t, x)
            if keep_paths:
                paths.append(x)
            else:
                paths = [x]
        idx = np.flatnonzero(ok)
        if n_target is not None:
            idx = idx[: n_target - accepted]
            # attempts up to and including the last accepted path when stopping early
            if accepted + idx.size >= n_target:
                size = int(idx[-1]) + 1 if idx.size else size
        attempts += size
        accepted += idx.size
        if idx.size:
            kept.append(np.stack(paths, axis=1)[idx] if keep_paths else x[idx][:, None, :])
            if stats is not None:
                kept_stats.append(stats[idx])
        b += 1
    if accepted == 0:
        raise RejectionError(attempts)
    paths = np.concatenate(kept)
    ens = ParticleEnsemble(paths, np.zeros(accepted), 0.0, np.concatenate(kept_stats) if kept_stats else None)
    ess = np.full(T + 1, np.nan)
    ess[T] = float(accepted)
    return RunReport(
        ensemble=ens,
        ess=ess,
        scored=np.zeros(T + 1, dtype=bool),
        resample_times=[],
        score_summary=[],
        killed=np.zeros(T + 1, dtype=np.int64),
        wall_time=_time.perf_counter() - clock,
        seed=streams.seed,
        key=streams.key,
        n=accepted,
        attempts=attempts,
        accepted=accepted,
    )


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------


def estimate(ensemble: ParticleEnsemble, h, se: str = "ess") -> tuple:
    """Self-normalised estimate of ``E[h]`` and its standard error.

    Parameters
    ----------
    ensemble : ParticleEnsemble
    h : callable or array_like
        A callable on the paths array ``(n, T+1, d)``, or per-particle values
        of shape ``(n,)`` or ``(n, k)``.
    se : {"ess", "lineage"}
        ``"ess"`` is the weighted variance over the effective sample size,
        ``sqrt(sum_i wbar_i (h_i - mu)^2 / ESS)``.  ``"lineage"`` groups
        particles by their time-0 ancestor and uses
        ``sqrt(sum_e (sum_{i in e} wbar_i (h_i - mu))^2)``, which stays
        valid for path functionals after resampling has merged lineages.
    """
    values = h(ensemble.paths) if callable(h) else h
    values = np.asarray(values, dtype=float)
    if values.shape[0] != ensemble.n:
        raise ValueError("one value per particle is required")
    w = ensemble.normalized_weights()
    shape = (-1,) + (1,) * (values.ndim - 1)
    wb = w.reshape(shape)
    mu = np.sum(wb * values, axis=0)
    if se == "ess":
        var = np.sum(wb * (values - mu) ** 2, axis=0)
        n_eff = 1.0 / np.sum(w * w)
        err = np.sqrt(var / n_eff)
    elif se == "lineage":
        origin = ensemble.origin if ensemble.origin is not None else np.arange(ensemble.n)
        _, group = np.unique(origin, return_inverse=True)
        contrib = wb * (values - mu)
        flat = contrib.reshape(ensemble.n, -1)
        sums = np.zeros((group.max() + 1, flat.shape[1]))
        np.add.at(sums, group, flat)
        err = np.sqrt(np.sum(sums * sums, axis=0)).reshape(mu.shape)
    else:
        raise ValueError(f"unknown standard-error method {se!r}")
    if values.ndim == 1:
        return float(mu), float(err)
    return mu, err


def marginal_means(ensemble: ParticleEnsemble, component: int = 0, se: str = "ess"):
    """Weighted means and standard errors of ``x_t`` at every time."""
    return estimate(ensemble, ensemble.paths[:, :, component], se=se)
