"""Scalar Kalman filter and Rauch-Tung-Striebel smoother.

Model::

    x_0 ~ N(init_mean, init_var)
    x_t = coef * x_{t-1} + N(0, noise_var)
    y_t = obs_coef * x_t + N(0, obs_var_t)

A zero observation variance is an exact constraint ``obs_coef * x_t = y_t``;
the update is then done by exact conditioning, never by inverting a zero
variance.  Missing observations are ``nan``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from csmc.errors import ModelError

_NEG_TOL = 1e-12


@dataclass(frozen=True)
class LinearGaussianSpec:
    coef: float = 1.0
    noise_var: float = 1.0
    obs_coef: float = 1.0
    init_mean: float = 0.0
    init_var: float = 0.0

    def __post_init__(self):
        if self.noise_var < 0 or self.init_var < 0:
            raise ValueError("variances must be nonnegative")


@dataclass(frozen=True)
class KalmanResult:
    filtered_mean: np.ndarray
    filtered_var: np.ndarray
    smoothed_mean: np.ndarray
    smoothed_var: np.ndarray
    log_likelihood: float


def _clip(v: float, scale: float, where: str) -> float:
    if v < 0:
        if v < -_NEG_TOL * max(1.0, scale):
            raise ModelError(f"negative variance {v:g} in {where}")
        return 0.0
    return v


def kalman_smooth(spec: LinearGaussianSpec, observations, obs_var) -> KalmanResult:
    """Exact smoothing moments ``E[x_t | y_{0:T}]`` and ``Var[x_t | y_{0:T}]``.

    Parameters
    ----------
    spec : LinearGaussianSpec
    observations : array_like, shape (T + 1,)
        ``nan`` where nothing is observed.
    obs_var : float or array_like, shape (T + 1,)
        Observation variances; ``0`` means an exact constraint.
    """
    y = np.asarray(observations, dtype=float)
    T1 = y.size
    R = np.broadcast_to(np.asarray(obs_var, dtype=float), (T1,))
    F, Q, H = spec.coef, spec.noise_var, spec.obs_coef
    mf = np.empty(T1)
    Pf = np.empty(T1)
    mp = np.empty(T1)
    Pp = np.empty(T1)
    loglik = 0.0
    m, P = spec.init_mean, spec.init_var
    for t in range(T1):
        if t > 0:
            m, P = F * m, F * F * P + Q
        mp[t], Pp[t] = m, P
        if not np.isnan(y[t]):
            S = H * H * P + R[t]
            resid = y[t] - H * m
            if S > 0:
                K = P * H / S
                m = m + K * resid
                P = _clip(P * R[t] / S, P, f"filter update t={t}")
                loglik += -0.5 * (np.log(2 * np.pi * S) + resid * resid / S)
            elif abs(resid) > 1e-9 * max(1.0, abs(y[t])):
                raise ModelError(f"exact observation at t={t} contradicts a deterministic state")
        mf[t], Pf[t] = m, P
    ms = mf.copy()
    Ps = Pf.copy()
    for t in range(T1 - 2, -1, -1):
        if Pp[t + 1] > 0:
            J = Pf[t] * F / Pp[t + 1]
            ms[t] = mf[t] + J * (ms[t + 1] - mp[t + 1])
            Ps[t] = _clip(Pf[t] + J * J * (Ps[t + 1] - Pp[t + 1]), Pf[t], f"smoother t={t}")
    return KalmanResult(mf, Pf, ms, Ps, float(loglik))


def future_log_likelihood(spec: LinearGaussianSpec, observations, obs_var, start: int, end: int):
    """Quadratic coefficients of ``log p(y_{t+1:end} | x_t)`` for ``t = start..end-1``.

    Returns ``(prec, info)`` with ``log p(y_{t+1:end} | x_t) =
    -0.5 * prec[t-start] * x^2 + info[t-start] * x + const``.  An exact
    observation at ``end`` is supported; intermediate ones are not.
    """
    y = np.asarray(observations, dtype=float)
    R = np.broadcast_to(np.asarray(obs_var, dtype=float), y.shape)
    F, Q, H = spec.coef, spec.noise_var, spec.obs_coef
    if not Q > 0:
        raise ValueError("future likelihood needs positive transition noise")
    n = end - start
    prec = np.empty(n)
    info = np.empty(n)
    # message arriving at x_{end}: the observation at end, possibly exact
    lam, eta = 0.0, 0.0
    exact = None
    if not np.isnan(y[end]):
        if R[end] == 0:
            exact = y[end] / H
        else:
            lam, eta = H * H / R[end], H * y[end] / R[end]
    for s in range(end, start, -1):
        if exact is not None:
            new_lam, new_eta = F * F / Q, F * exact / Q
            exact = None
        else:
            A = 1.0 / Q + lam
            new_lam = F * F / Q - F * F / (Q * Q * A)
            new_eta = F * eta / (Q * A)
        prec[s - 1 - start], info[s - 1 - start] = new_lam, new_eta
        lam, eta = new_lam, new_eta
        if s - 1 > start and not np.isnan(y[s - 1]):
            if R[s - 1] == 0:
                raise ValueError("exact intermediate observations are not supported")
            lam += H * H / R[s - 1]
            eta += H * y[s - 1] / R[s - 1]
    return prec, info
