"""Contracts for a constrained stochastic system.

A system is a :class:`DynamicModel` (initial law and forward propagation),
a :class:`ConstraintSchedule` holding one constraint descriptor per time
step, and a :class:`Proposal` used to draw new states.

All evaluators are vectorised over particles: states are arrays of shape
``(n, state_dim)`` and densities are returned as arrays of shape ``(n,)``
in log scale.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Prefix:
    """What a forward kernel may condition on when drawing ``x_t``.

    ``last`` is ``x_{t-1}`` with shape ``(n, d)``; ``stats`` is the summary
    ``S(x_{0:t-1})`` with shape ``(n, k)`` (``None`` when the model has no
    summary); ``paths`` is the full history ``x_{0:t-1}`` with shape
    ``(n, t, d)``.  Pilot runs only carry ``last`` and ``stats``; models
    that need ``paths`` cannot be used with summary-based pilots.
    """

    last: np.ndarray
    stats: np.ndarray | None = None
    paths: np.ndarray | None = None

    def __len__(self) -> int:
        return self.last.shape[0]

    def take(self, idx: np.ndarray) -> "Prefix":
        return Prefix(
            self.last[idx],
            None if self.stats is None else self.stats[idx],
            None if self.paths is None else self.paths[idx],
        )


def gaussian_logpdf(x, mean, var):
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


# ---------------------------------------------------------------------------
# Constraint descriptors
# ---------------------------------------------------------------------------


class Constraint:
    """Base class of the per-time constraint descriptors."""

    strong: bool = False

    def log_likelihood(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Trivial(Constraint):
    """No information: ``x_t`` anywhere in the state space."""

    strong: bool = False

    def __post_init__(self):
        if self.strong:
            raise ValueError("a trivial constraint cannot be strong")

    def log_likelihood(self, x):
        return np.zeros(np.shape(x)[0])


@dataclass(frozen=True)
class Observation(Constraint):
    """A noisy measurement ``y_t`` of the state.

    ``log_density(value, x)`` returns ``log p(y_t | x_t)`` per particle.
    ``variance`` and ``index`` are optional hints recording that the
    density is Gaussian on component ``index``; pilot samplers use them to
    build terminal proposals.
    """

    value: np.ndarray | float
    log_density: Callable[[np.ndarray, np.ndarray], np.ndarray]
    strong: bool = False
    variance: float | None = None
    index: int = 0

    @classmethod
    def gaussian(cls, value: float, variance: float, *, strong: bool = False, index: int = 0):
        if not variance > 0:
            raise ValueError(f"observation variance must be positive, got {variance}")

        def log_density(y, x):
            return gaussian_logpdf(y, x[:, index], variance)

        return cls(float(value), log_density, strong=strong, variance=float(variance), index=index)

    def log_likelihood(self, x):
        return np.asarray(self.log_density(self.value, x), dtype=float)


@dataclass(frozen=True)
class FixedPoint(Constraint):
    """``x_t`` equals ``value`` exactly (``atol`` allows float round-off)."""

    value: np.ndarray | float
    strong: bool = True
    atol: float = 1e-12

    @property
    def point(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.value, dtype=float))

    def log_likelihood(self, x):
        hit = np.all(np.abs(x - self.point) <= self.atol, axis=1)
        return np.where(hit, 0.0, -np.inf)


@dataclass(frozen=True)
class Subset(Constraint):
    """``x_t`` lies in a region given by an indicator.

    ``upper`` (with ``index``) marks the region as ``{x[index] < upper}``;
    terminal proposals use this hint to sample from a truncated normal.
    """

    indicator: Callable[[np.ndarray], np.ndarray]
    strong: bool = True
    upper: float | None = None
    index: int = 0

    @classmethod
    def below(cls, c: float, *, strong: bool = True, index: int = 0):
        c = float(c)
        return cls(lambda x: x[:, index] < c, strong=strong, upper=c, index=index)

    def log_likelihood(self, x):
        inside = np.asarray(self.indicator(x), dtype=bool)
        return np.where(inside, 0.0, -np.inf)


class ConstraintSchedule:
    """One constraint descriptor per time ``0..T``.

    Parameters
    ----------
    descriptors : sequence of Constraint
        ``descriptors[t]`` is the constraint at time ``t``.
    """

    def __init__(self, descriptors: Sequence[Constraint]):
        if len(descriptors) == 0:
            raise ValueError("a schedule needs at least one time step")
        for t, d in enumerate(descriptors):
            if not isinstance(d, Constraint):
                raise TypeError(f"descriptor at t={t} is not a Constraint: {d!r}")
            if isinstance(d, Trivial) and d.strong:
                raise ValueError(f"trivial constraint flagged strong at t={t}")
        self.descriptors = tuple(descriptors)
        self.horizon = len(descriptors) - 1
        self.strong_times = tuple(t for t, d in enumerate(descriptors) if d.strong)
        # next_strong[t] = smallest strong time >= t, or t when none remains
        nxt = np.arange(self.horizon + 1)
        upcoming = None
        for t in range(self.horizon, -1, -1):
            if self.descriptors[t].strong:
                upcoming = t
            nxt[t] = t if upcoming is None else upcoming
        self._t_plus = nxt

    @classmethod
    def from_mapping(cls, horizon: int, constraints: Mapping[int, Constraint]):
        """Build a schedule that is trivial except at the given times."""
        desc: list[Constraint] = [Trivial() for _ in range(horizon + 1)]
        for t, c in constraints.items():
            if not 0 <= t <= horizon:
                raise ValueError(f"constraint time {t} outside 0..{horizon}")
            desc[t] = c
        return cls(desc)

    def __len__(self) -> int:
        return self.horizon + 1

    def __getitem__(self, t: int) -> Constraint:
        return self.descriptors[t]

    def t_plus(self, t: int) -> int:
        """Next strong time at or after ``t``; ``t`` itself if none remains."""
        if not 0 <= t <= self.horizon:
            raise IndexError(f"t={t} outside 0..{self.horizon}")
        return int(self._t_plus[t])

    def log_likelihood(self, t: int, x: np.ndarray) -> np.ndarray:
        return self.descriptors[t].log_likelihood(x)

    def segments(self) -> list[tuple[int, int]]:
        """Half-open segments ``(T_{k-1}, T_k]`` between strong times."""
        bounds = sorted(set((0,) + self.strong_times))
        if len(bounds) == 1:
            return [(0, self.horizon)]
        return list(zip(bounds[:-1], bounds[1:]))

    def segment_of(self, t: int) -> tuple[int, int] | None:
        for seg in self.segments():
            if seg[0] < t <= seg[1]:
                return seg
        return None


def t_plus(schedule: ConstraintSchedule, t: int) -> int:
    return schedule.t_plus(t)


def constraint_log_likelihood(schedule: ConstraintSchedule, t: int, x: np.ndarray) -> np.ndarray:
    """``log p(I_t | x_t)`` per particle: 0 for trivial, 0/-inf for hard constraints."""
    return schedule.log_likelihood(t, np.atleast_2d(x))


def segmentize(schedule: ConstraintSchedule) -> list[tuple[int, int]]:
    return schedule.segments()


# ---------------------------------------------------------------------------
# Models and proposals
# ---------------------------------------------------------------------------


class DynamicModel(ABC):
    """Initial law ``p(x_0)`` and forward kernel ``p(x_t | x_{0:t-1})``.

    Subclasses set ``state_dim`` and ``markov``.  A model with a low
    dimensional summary statistic sets ``summary_dim > 0`` and implements
    :meth:`summary_init`, :meth:`summary_update` and :meth:`summary`; its
    forward kernel must then depend on the prefix only through
    ``prefix.stats``.
    """

    state_dim: int = 1
    markov: bool = True
    summary_dim: int = 0

    @property
    def has_summary(self) -> bool:
        return self.summary_dim > 0

    @abstractmethod
    def sample_initial(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    @abstractmethod
    def initial_logpdf(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def sample_forward(self, t: int, prefix: Prefix, rng: np.random.Generator) -> np.ndarray: ...

    @abstractmethod
    def forward_logpdf(self, t: int, prefix: Prefix, x: np.ndarray) -> np.ndarray: ...

    def forward_moments(self, t: int, prefix: Prefix) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance of a Gaussian forward kernel, shape ``(n, d)`` each."""
        raise NotImplementedError(f"{type(self).__name__} has no Gaussian forward kernel")

    def summary_init(self, x0: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def summary_update(self, t: int, stats: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def summary(self, paths: np.ndarray) -> np.ndarray:
        """Recompute ``S(x_{0:t})`` from full paths of shape ``(n, t+1, d)``."""
        stats = self.summary_init(paths[:, 0])
        for s in range(1, paths.shape[1]):
            stats = self.summary_update(s, stats, paths[:, s])
        return stats


class Proposal(ABC):
    """Sampler and log-density ``q(x_t | x_{0:t-1})``.

    ``handles_constraints`` is true when the proposal already respects
    fixed-point and subset constraints itself; otherwise the engine wraps
    it so that hard constraints are hit exactly.
    """

    handles_constraints: bool = False

    @abstractmethod
    def propose_initial(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...

    @abstractmethod
    def propose(self, t: int, prefix: Prefix, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...

    @abstractmethod
    def logpdf(self, t: int, prefix: Prefix | None, x: np.ndarray) -> np.ndarray: ...


@dataclass
class BootstrapProposal(Proposal):
    """``q = p``: propagate with the model's own forward kernel."""

    model: DynamicModel

    def propose_initial(self, n, rng):
        x = self.model.sample_initial(n, rng)
        return x, self.model.initial_logpdf(x)

    def propose(self, t, prefix, rng):
        x = self.model.sample_forward(t, prefix, rng)
        return x, self.model.forward_logpdf(t, prefix, x)

    def logpdf(self, t, prefix, x):
        if t == 0:
            return self.model.initial_logpdf(x)
        return self.model.forward_logpdf(t, prefix, x)


@dataclass
class DriftedProposal(Proposal):
    """Gaussian forward kernel with an extra constant drift per step.

    Requires :meth:`DynamicModel.forward_moments`.  ``drift`` may be a
    float or a callable ``t -> float``.
    """

    model: DynamicModel
    drift: float | Callable[[int], float] = 0.0

    def _drift(self, t):
        return self.drift(t) if callable(self.drift) else self.drift

    def propose_initial(self, n, rng):
        x = self.model.sample_initial(n, rng)
        return x, self.model.initial_logpdf(x)

    def propose(self, t, prefix, rng):
        mean, var = self.model.forward_moments(t, prefix)
        mean = mean + self._drift(t)
        x = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        return x, np.sum(gaussian_logpdf(x, mean, var), axis=1)

    def logpdf(self, t, prefix, x):
        if t == 0:
            return self.model.initial_logpdf(x)
        mean, var = self.model.forward_moments(t, prefix)
        return np.sum(gaussian_logpdf(x, mean + self._drift(t), var), axis=1)


@dataclass
class ConstraintAwareProposal(Proposal):
    """Wrap a proposal so that hard constraints are satisfied by construction.

    At a :class:`FixedPoint` time the state is set to the point (log q = 0,
    a density with respect to counting measure), so the incremental weight
    reduces to ``p(point | x_{0:t-1})``.  At a :class:`Subset` time with an
    ``upper`` hint the state is drawn from the model's Gaussian forward
    kernel truncated to the subset.  Other times defer to ``base``.
    """

    base: Proposal
    model: DynamicModel
    schedule: ConstraintSchedule
    handles_constraints: bool = field(default=True, init=False)

    def _kind(self, t):
        c = self.schedule[t]
        if isinstance(c, FixedPoint):
            return "point"
        if isinstance(c, Subset) and c.upper is not None and t > 0:
            return "truncate"
        return None

    def propose_initial(self, n, rng):
        c = self.schedule[0]
        if isinstance(c, FixedPoint):
            return np.tile(c.point, (n, 1)), np.zeros(n)
        return self.base.propose_initial(n, rng)

    def propose(self, t, prefix, rng):
        kind = self._kind(t)
        if kind == "point":
            return np.tile(self.schedule[t].point, (len(prefix), 1)), np.zeros(len(prefix))
        if kind == "truncate":
            return self._truncated(t, prefix, rng)
        return self.base.propose(t, prefix, rng)

    def _truncated(self, t, prefix, rng):
        from csmc.oracles.truncnorm import truncated_normal, truncated_normal_logpdf

        c = self.schedule[t]
        mean, var = self.model.forward_moments(t, prefix)
        if mean.shape[1] != 1:
            raise NotImplementedError("subset truncation is implemented for scalar states")
        z = truncated_normal(mean[:, 0], var[:, 0], c.upper, rng)
        logq = truncated_normal_logpdf(z, mean[:, 0], var[:, 0], c.upper)
        return z[:, None], logq

    def logpdf(self, t, prefix, x):
        kind = self._kind(t)
        if kind == "point":
            return self.schedule[t].log_likelihood(x)
        if kind == "truncate":
            from csmc.oracles.truncnorm import truncated_normal_logpdf

            mean, var = self.model.forward_moments(t, prefix)
            return truncated_normal_logpdf(x[:, 0], mean[:, 0], var[:, 0], self.schedule[t].upper)
        if t == 0 and isinstance(self.schedule[0], FixedPoint):
            return self.schedule[0].log_likelihood(x)
        return self.base.logpdf(t, prefix, x)


def constraint_aware(proposal: Proposal, model: DynamicModel, schedule: ConstraintSchedule) -> Proposal:
    if proposal.handles_constraints:
        return proposal
    return ConstraintAwareProposal(proposal, model, schedule)
