"""Closed-form bridge densities and brute-force enumeration on small chains."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

MAX_PATHS = 10**6


def bridge_log_density(t, x, T, b, step_variance):
    """``log N(b; x, (T - t) * step_variance)`` for a constant-variance random walk."""
    t = np.asarray(t, dtype=float)
    if np.any(t >= T):
        raise ValueError("bridge density needs t < T")
    v = (T - t) * step_variance
    x = np.asarray(x, dtype=float)
    return -0.5 * (np.log(2 * np.pi * v) + (b - x) ** 2 / v)


def bridge_density(t, x, T, b, step_variance):
    """Density of reaching ``x_T = b`` from ``x_t = x`` for a Gaussian random walk."""
    return np.exp(bridge_log_density(t, x, T, b, step_variance))


@dataclass(frozen=True)
class EnumerationResult:
    marginals: np.ndarray  # (T + 1, K)
    log_evidence: float


def _transition_list(transition, T):
    if callable(transition):
        return [np.asarray(transition(t), float) for t in range(1, T + 1)]
    P = np.asarray(transition, float)
    if P.ndim == 3:
        return list(P)
    return [P] * T


def _all_paths(K: int, length: int) -> np.ndarray:
    if K**length > MAX_PATHS:
        raise ValueError(f"{K}^{length} paths exceed the enumeration cap of {MAX_PATHS}")
    return np.array(list(itertools.product(range(K), repeat=length)), dtype=np.intp).reshape(-1, length)


def enumerate_posterior(initial, transition, log_likelihood) -> EnumerationResult:
    """Exact ``p(x_t | I_{0:T})`` for a finite chain by summing over every path.

    Parameters
    ----------
    initial : array_like, shape (K,)
        Initial probabilities.
    transition : array_like (K, K), (T, K, K), or callable ``t -> (K, K)``
        ``transition[i, j] = p(x_t = j | x_{t-1} = i)``.
    log_likelihood : array_like, shape (T + 1, K)
        ``log p(I_t | x_t = k)``.
    """
    initial = np.asarray(initial, float)
    loglik = np.asarray(log_likelihood, float)
    T1, K = loglik.shape
    mats = _transition_list(transition, T1 - 1)
    paths = _all_paths(K, T1)
    with np.errstate(divide="ignore"):
        logp = np.log(initial)[paths[:, 0]] + loglik[0, paths[:, 0]]
        for t in range(1, T1):
            logp = logp + np.log(mats[t - 1])[paths[:, t - 1], paths[:, t]] + loglik[t, paths[:, t]]
    log_z = logsumexp(logp)
    if log_z == -np.inf:
        raise ValueError("every path has zero probability")
    prob = np.exp(logp - log_z)
    marg = np.zeros((T1, K))
    for t in range(T1):
        marg[t] = np.bincount(paths[:, t], weights=prob, minlength=K)
    return EnumerationResult(marg, float(log_z))


def enumerate_future_likelihood(transition, log_likelihood, t: int, t_end: int) -> np.ndarray:
    """``p(I_{t+1:t_end} | x_t = k)`` for every state ``k``, by enumerating future paths."""
    loglik = np.asarray(log_likelihood, float)
    K = loglik.shape[1]
    mats = _transition_list(transition, loglik.shape[0] - 1)
    steps = t_end - t
    if steps == 0:
        return np.ones(K)
    fut = _all_paths(K, steps)
    out = np.empty(K)
    with np.errstate(divide="ignore"):
        for k in range(K):
            prev = np.full(fut.shape[0], k)
            logp = np.zeros(fut.shape[0])
            for s in range(steps):
                cur = fut[:, s]
                logp += np.log(mats[t + s])[prev, cur] + loglik[t + s + 1, cur]
                prev = cur
            out[k] = np.exp(logsumexp(logp))
    return out
