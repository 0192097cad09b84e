"""Reusable dynamic models."""

from __future__ import annotations

from typing import Callable

import numpy as np

from csmc.model import DynamicModel, gaussian_logpdf


class GaussianMarkovModel(DynamicModel):
    """Markov model with Gaussian transitions ``x_t ~ N(mean(t, x_{t-1}), var(t, x_{t-1}))``.

    The initial law is ``N(x0_mean, x0_var)``, or a point mass at
    ``x0_mean`` when ``x0_var == 0``.  ``mean`` and ``var`` receive arrays
    of shape ``(n, d)`` and return arrays broadcastable to that shape.
    """

    markov = True

    def __init__(
        self,
        mean: Callable[[int, np.ndarray], np.ndarray],
        var: Callable[[int, np.ndarray], np.ndarray] | float,
        x0_mean=0.0,
        x0_var: float = 0.0,
        state_dim: int = 1,
    ):
        self._mean = mean
        self._var = var if callable(var) else (lambda t, x, v=float(var): np.full_like(x, v))
        self.x0_mean = np.broadcast_to(np.asarray(x0_mean, dtype=float), (state_dim,)).copy()
        if x0_var < 0:
            raise ValueError("initial variance must be nonnegative")
        self.x0_var = float(x0_var)
        self.state_dim = state_dim

    def sample_initial(self, n, rng):
        x = np.tile(self.x0_mean, (n, 1))
        if self.x0_var > 0:
            x = x + np.sqrt(self.x0_var) * rng.standard_normal(x.shape)
        return x

    def initial_logpdf(self, x):
        if self.x0_var == 0:
            hit = np.all(x == self.x0_mean, axis=1)
            return np.where(hit, 0.0, -np.inf)
        return np.sum(gaussian_logpdf(x, self.x0_mean, self.x0_var), axis=1)

    def forward_moments(self, t, prefix):
        x = prefix.last
        mean = np.broadcast_to(self._mean(t, x), x.shape)
        var = np.broadcast_to(self._var(t, x), x.shape)
        return mean, var

    def sample_forward(self, t, prefix, rng):
        mean, var = self.forward_moments(t, prefix)
        return mean + np.sqrt(var) * rng.standard_normal(mean.shape)

    def forward_logpdf(self, t, prefix, x):
        mean, var = self.forward_moments(t, prefix)
        return np.sum(gaussian_logpdf(x, mean, var), axis=1)


class LinearGaussianModel(GaussianMarkovModel):
    """Scalar ``x_t = coef * x_{t-1} + N(0, noise_var)``."""

    def __init__(self, coef: float = 1.0, noise_var: float = 1.0, x0_mean: float = 0.0, x0_var: float = 0.0):
        if not noise_var > 0:
            raise ValueError("transition noise variance must be positive")
        self.coef = float(coef)
        self.noise_var = float(noise_var)
        super().__init__(lambda t, x: self.coef * x, self.noise_var, x0_mean, x0_var)


class EulerMaruyamaModel(GaussianMarkovModel):
    """Euler-Maruyama discretisation of ``dX = mu(X, tau) dtau + sigma(X, tau) dW``.

    ``x_t ~ N(x_{t-1} + mu(x_{t-1}, tau_{t-1}) * delta, sigma(x_{t-1}, tau_{t-1})^2 * delta)``
    with ``tau_t = t * delta``.
    """

    def __init__(
        self,
        drift: Callable[[np.ndarray, float], np.ndarray],
        delta: float,
        x0: float = 0.0,
        diffusion: Callable[[np.ndarray, float], np.ndarray] | float = 1.0,
    ):
        if not delta > 0:
            raise ValueError("step size must be positive")
        self.drift = drift
        self.delta = float(delta)
        if callable(diffusion):
            var = lambda t, x: diffusion(x, (t - 1) * self.delta) ** 2 * self.delta  # noqa: E731
        else:
            var = float(diffusion) ** 2 * self.delta
        super().__init__(lambda t, x: x + self.drift(x, (t - 1) * self.delta) * self.delta, var, x0, 0.0)


class DiscreteMarkovModel(DynamicModel):
    """Finite-state chain on ``{0, ..., K-1}`` (states stored as floats).

    ``transition`` is a ``(K, K)`` row-stochastic matrix, or a callable
    ``t -> (K, K)`` matrix for time-varying chains.
    """

    markov = True
    state_dim = 1

    def __init__(self, initial: np.ndarray, transition):
        self.initial = np.asarray(initial, dtype=float)
        self.K = self.initial.size
        self._transition = transition if callable(transition) else (lambda t, P=np.asarray(transition, float): P)

    def transition(self, t: int) -> np.ndarray:
        return self._transition(t)

    @staticmethod
    def _draw(probs: np.ndarray, rng) -> np.ndarray:
        cdf = np.cumsum(probs, axis=-1)
        u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
        return np.sum(cdf <= u, axis=-1)

    def sample_initial(self, n, rng):
        idx = self._draw(np.broadcast_to(self.initial, (n, self.K)), rng)
        return idx[:, None].astype(float)

    def initial_logpdf(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.initial[x[:, 0].astype(int)])

    def sample_forward(self, t, prefix, rng):
        P = self.transition(t)
        rows = P[prefix.last[:, 0].astype(int)]
        return self._draw(rows, rng)[:, None].astype(float)

    def forward_logpdf(self, t, prefix, x):
        P = self.transition(t)
        with np.errstate(divide="ignore"):
            return np.log(P[prefix.last[:, 0].astype(int), x[:, 0].astype(int)])
