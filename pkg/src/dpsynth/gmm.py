"""One-dimensional Gaussian mixture fitting by expectation maximization.

Initialisation is by quantiles of the sorted data, which makes the fit
deterministic; the seed argument is accepted for interface uniformity with
the rest of the pipeline but does not influence the result. Component
standard deviations are floored at SIGMA_FLOOR to keep EM from collapsing
onto repeated values. When the data has fewer distinct values than the
requested mode count, the mixture is fitted with one component per distinct
value and padded with zero-weight components so the encoded width declared
by the schema stays fixed.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .schema import SIGMA_FLOOR, GmmModel

LOG_2PI = np.log(2.0 * np.pi)


def log_component_densities(values: np.ndarray, model: GmmModel) -> np.ndarray:
    """log N(v; mu_m, sigma_m) for every (value, mode) pair -> (n, M)."""
    v = np.asarray(values, dtype=np.float64)[:, None]
    z = (v - model.means[None, :]) / model.stds[None, :]
    return -0.5 * z * z - np.log(model.stds)[None, :] - 0.5 * LOG_2PI


def log_likelihood(values: np.ndarray, model: GmmModel) -> float:
    """Total data log-likelihood under the mixture."""
    with np.errstate(divide="ignore"):
        joint = log_component_densities(values, model) + np.log(model.weights)[None, :]
    m = joint.max(axis=1, keepdims=True)
    return float((m[:, 0] + np.log(np.exp(joint - m).sum(axis=1))).sum())


def responsibilities(values: np.ndarray, model: GmmModel) -> np.ndarray:
    """Posterior mode probabilities p(m | v) -> (n, M) rows summing to 1."""
    with np.errstate(divide="ignore"):
        joint = log_component_densities(values, model) + np.log(model.weights)[None, :]
    m = joint.max(axis=1, keepdims=True)
    r = np.exp(joint - m)
    return r / r.sum(axis=1, keepdims=True)


def fit_gmm(
    values,
    n_modes: int,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 200,
    return_history: bool = False,
):
    """Fit an M-mode mixture to a 1-d sample.

    Runs EM to convergence (log-likelihood change < tol) or max_iter
    iterations. With return_history=True also returns the log-likelihood
    after each iteration, which is non-decreasing while the variance floor
    is inactive.
    """
    if n_modes < 1:
        raise ConfigError(f"mode count must be >= 1, got {n_modes}")
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ConfigError("cannot fit a mixture to an empty column")

    distinct = np.unique(v)
    m_eff = min(n_modes, len(distinct))

    if len(distinct) == 1:
        model = _pad(np.array([1.0]), distinct.copy(), np.array([SIGMA_FLOOR]), n_modes)
        return (model, [log_likelihood(v, model)]) if return_history else model

    # Quantile init: evenly spaced centers, shared spread, uniform weights.
    qs = (np.arange(m_eff) + 0.5) / m_eff
    means = np.quantile(v, qs)
    stds = np.full(m_eff, max(v.std(), SIGMA_FLOOR))
    weights = np.full(m_eff, 1.0 / m_eff)

    history: list[float] = []
    prev = -np.inf
    for _ in range(max_iter):
        model = GmmModel(weights, means, stds)
        gamma = responsibilities(v, model)
        ll = log_likelihood(v, model)
        history.append(ll)

        nk = gamma.sum(axis=0)
        safe = np.maximum(nk, 1e-300)
        weights = nk / v.size
        weights = weights / weights.sum()
        means = (gamma * v[:, None]).sum(axis=0) / safe
        var = (gamma * (v[:, None] - means[None, :]) ** 2).sum(axis=0) / safe
        stds = np.maximum(np.sqrt(var), SIGMA_FLOOR)

        if abs(ll - prev) < tol:
            break
        prev = ll

    model = _pad(weights, means, stds, n_modes)
    return (model, history) if return_history else model


def _pad(weights, means, stds, n_modes: int) -> GmmModel:
    """Zero-weight filler components keep the declared mode count."""
    short = n_modes - len(weights)
    if short > 0:
        center = float(np.average(means, weights=weights))
        weights = np.concatenate([weights, np.zeros(short)])
        means = np.concatenate([means, np.full(short, center)])
        stds = np.concatenate([stds, np.full(short, SIGMA_FLOOR)])
    return GmmModel(weights, means, stds)
