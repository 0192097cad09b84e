"""Viterbi maximisation of an additive path score over finite state sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from csmc.errors import InfeasibleError


@dataclass(frozen=True)
class DiscreteGrid:
    """Per-time state sets with additive log scores.

    ``log_transition[t - 1][i, j]`` scores the move from ``states[t-1][i]``
    to ``states[t][j]``; ``log_emission[t][j]`` scores ``states[t][j]``.
    Scores may be ``-inf``.
    """

    states: Sequence[np.ndarray]
    log_transition: Sequence[np.ndarray]
    log_emission: Sequence[np.ndarray]

    def __post_init__(self):
        T1 = len(self.states)
        if len(self.log_emission) != T1 or len(self.log_transition) != T1 - 1:
            raise ValueError("need T+1 state sets, T+1 emission vectors and T transition matrices")
        for t, s in enumerate(self.states):
            if len(s) == 0:
                raise ValueError(f"empty state set at t={t}")
            if np.shape(self.log_emission[t]) != (len(s),):
                raise ValueError(f"emission scores at t={t} do not match the state set")
        for t in range(1, T1):
            if np.shape(self.log_transition[t - 1]) != (len(self.states[t - 1]), len(self.states[t])):
                raise ValueError(f"transition scores into t={t} have the wrong shape")

    @classmethod
    def from_functions(
        cls,
        states: Sequence[np.ndarray],
        log_transition: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
        log_emission: Callable[[int, np.ndarray], np.ndarray],
    ) -> "DiscreteGrid":
        """Build a grid from ``log_transition(t, prev[:, None], cur[None, :])`` and ``log_emission(t, cur)``."""
        states = [np.asarray(s, dtype=float) for s in states]
        trans = [
            np.asarray(log_transition(t, states[t - 1][:, None], states[t][None, :]), float)
            for t in range(1, len(states))
        ]
        emit = [np.broadcast_to(np.asarray(log_emission(t, s), float), s.shape) for t, s in enumerate(states)]
        return cls(states, trans, emit)

    def path_score(self, idx: Sequence[int]) -> float:
        score = self.log_emission[0][idx[0]]
        for t in range(1, len(self.states)):
            score += self.log_transition[t - 1][idx[t - 1], idx[t]] + self.log_emission[t][idx[t]]
        return float(score)


def viterbi_map(grid: DiscreteGrid) -> tuple[np.ndarray, np.ndarray, float]:
    """Maximise the additive score with dynamic programming.

    Returns ``(indices, values, log_score)``.  Ties are broken toward the
    lowest state index, both at the final time and for every predecessor.

    Raises
    ------
    InfeasibleError
        If every path scores ``-inf``.
    """
    T1 = len(grid.states)
    delta = np.asarray(grid.log_emission[0], float)
    back = []
    for t in range(1, T1):
        cand = delta[:, None] + grid.log_transition[t - 1]
        arg = np.argmax(cand, axis=0)
        delta = cand[arg, np.arange(cand.shape[1])] + grid.log_emission[t]
        back.append(arg)
    last = int(np.argmax(delta))
    best = float(delta[last])
    if best == -np.inf:
        raise InfeasibleError("every path on the grid has score -inf")
    idx = np.empty(T1, dtype=int)
    idx[-1] = last
    for t in range(T1 - 1, 0, -1):
        idx[t - 1] = back[t - 1][idx[t]]
    values = np.array([grid.states[t][idx[t]] for t in range(T1)])
    return idx, values, best
