"""Particle machinery and exact-inference oracles.

Weight helpers accept either numpy arrays (oracles, diagnostics) or torch
tensors (the differentiable encoder path); the last axis always indexes
particles and leading axes are batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from scipy.special import logsumexp

from .envs import hmm_step, lgss_step
from .errors import (
    ContractError,
    DegenerateWeightsError,
    ImpossibleEvidenceError,
    NumericalError,
    ShapeError,
)


def _check_weights(logw) -> None:
    if isinstance(logw, torch.Tensor):
        ok = bool(torch.isfinite(logw.detach().max(-1).values).all()) and not bool(torch.isnan(logw).any())
    else:
        logw = np.asarray(logw)
        ok = np.isfinite(np.max(logw, -1)).all() and not np.isnan(logw).any()
    if not ok:
        raise DegenerateWeightsError("all particle weights are zero or non-finite")


def normalized_weights(logw):
    """Normalized weights computed in log space."""
    _check_weights(logw)
    if isinstance(logw, torch.Tensor):
        return torch.softmax(logw, -1)
    logw = np.asarray(logw, dtype=float)
    return np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))


def resample_ancestors(logw, rng):
    """Multinomial ancestor indices (0-based), one per particle.

    ``rng`` is a ``torch.Generator`` for tensor input and a numpy
    ``Generator`` otherwise. With a single particle the answer is ``[0]`` and
    no random numbers are consumed.
    """
    w = normalized_weights(logw)
    if isinstance(w, torch.Tensor):
        w = w.detach()
        k = w.shape[-1]
        if k == 1:
            return torch.zeros(w.shape, dtype=torch.long)
        cdf = torch.cumsum(w, -1)
        u = torch.rand(w.shape, generator=rng, dtype=w.dtype) * cdf[..., -1:]
        return torch.searchsorted(cdf.contiguous(), u, right=True).clamp_(max=k - 1)
    k = w.shape[-1]
    if k == 1:
        return np.zeros(w.shape, dtype=int)
    cdf = np.cumsum(w, -1)
    u = rng.random(w.shape) * cdf[..., -1:]
    if w.ndim == 1:
        idx = np.searchsorted(cdf, u, side="right")
    else:
        flat_cdf = cdf.reshape(-1, k)
        flat_u = u.reshape(-1, k)
        idx = np.stack([np.searchsorted(c, x, side="right") for c, x in zip(flat_cdf, flat_u)])
        idx = idx.reshape(w.shape)
    return np.minimum(idx, k - 1)


def ess(logw):
    """Effective sample size ``1 / sum(w_bar**2)``."""
    w = normalized_weights(logw)
    if isinstance(w, torch.Tensor):
        return 1.0 / (w.detach() ** 2).sum(-1)
    return 1.0 / (w ** 2).sum(-1)


def elbo_term(logw):
    """``log(mean_k w_k)`` via log-sum-exp; differentiable for tensor input."""
    _check_weights(logw)
    k = logw.shape[-1]
    if isinstance(logw, torch.Tensor):
        return torch.logsumexp(logw, -1) - math.log(k)
    return logsumexp(np.asarray(logw, dtype=float), axis=-1) - math.log(k)


def iwae_elbo(per_step_logw: Sequence):
    """Importance-weighted bound from un-resampled per-step log-weights."""
    if len(per_step_logw) == 0:
        raise ContractError("iwae_elbo needs at least one step")
    shapes = {tuple(np.shape(lw)) for lw in per_step_logw}
    if len(shapes) != 1:
        raise ContractError(f"ragged per-step weights: {sorted(shapes)}")
    if isinstance(per_step_logw[0], torch.Tensor):
        total = torch.stack(list(per_step_logw)).sum(0)
    else:
        total = np.sum(np.asarray(per_step_logw, dtype=float), axis=0)
    return elbo_term(total)


# --------------------------------------------------------------------------
# Exact oracles
# --------------------------------------------------------------------------


def _gauss_logpdf_full(x: np.ndarray, mean: np.ndarray, cov: np.ndarray, step: int) -> float:
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericalError("predictive covariance is not positive definite", step=step)
    diff = np.linalg.solve(chol, x - mean)
    return float(-0.5 * len(x) * math.log(2 * math.pi) - np.log(np.diag(chol)).sum() - 0.5 * diff @ diff)


def kalman_log_marginal(model, obs, actions=None) -> float:
    """Exact ``log p(o_1..o_T | a_0..a_{T-1})`` for a linear-Gaussian model.

    ``s_0`` is drawn from the prior and is not observed; ``s_t = A s_{t-1} +
    B a_{t-1} + noise`` and ``o_t = C s_t + noise`` for ``t = 1..T``.
    """
    obs = np.asarray(obs, dtype=float).reshape(len(obs), -1)
    T = len(obs)
    if obs.shape[1] != model.obs_dim:
        raise ShapeError(f"observations have dim {obs.shape[1]}, model expects {model.obs_dim}")
    if actions is None:
        actions = np.zeros((T, model.action_dim))
    actions = np.asarray(actions, dtype=float).reshape(T, -1)
    if actions.shape[1] != model.action_dim:
        raise ShapeError(f"actions have dim {actions.shape[1]}, model expects {model.action_dim}")
    mean, cov = model.prior_mean.copy(), model.prior_cov.copy()
    total = 0.0
    for t in range(T):
        mean = model.A @ mean + model.B @ actions[t]
        cov = model.A @ cov @ model.A.T + model.Q
        pred_mean = model.C @ mean
        S = model.C @ cov @ model.C.T + model.R
        total += _gauss_logpdf_full(obs[t], pred_mean, S, step=t + 1)
        gain = np.linalg.solve(S, model.C @ cov).T
        mean = mean + gain @ (obs[t] - pred_mean)
        cov = cov - gain @ model.C @ cov
        cov = 0.5 * (cov + cov.T)
    return total


def simulate_lgss(model, T: int, rng: np.random.Generator, actions=None):
    """Draw ``(states, obs)`` for ``t = 1..T`` under the oracle convention."""
    if actions is None:
        actions = np.zeros((T, model.action_dim))
    s = rng.multivariate_normal(model.prior_mean, model.prior_cov)
    states, obs = [], []
    for t in range(T):
        s, o = lgss_step(model, s, actions[t], rng)
        states.append(s)
        obs.append(o)
    return np.asarray(states), np.asarray(obs)


def exact_belief_update(model, belief, action: int, obs: int):
    """Bayes filter step for a discrete HMM.

    Returns ``(new_belief, log_normalizer)`` where the normalizer is
    ``log p(o | history)``.
    """
    b = np.asarray(belief, dtype=float)
    if (b < 0).any() or abs(b.sum() - 1.0) > 1e-9:
        raise ContractError("belief must be a probability vector")
    predicted = b @ model.transitions[int(action)]
    unnorm = predicted * model.emissions[int(action)][:, int(obs)]
    z = unnorm.sum()
    if z <= 0.0:
        raise ImpossibleEvidenceError(f"observation {obs} has zero probability under the belief")
    return unnorm / z, math.log(z)


def simulate_hmm(model, T: int, rng: np.random.Generator, actions=None):
    if actions is None:
        actions = np.zeros(T, dtype=int)
    s = int(rng.choice(model.n_states, p=model.initial))
    states, obs = [], []
    for t in range(T):
        s, o = hmm_step(model, s, int(actions[t]), rng)
        states.append(s)
        obs.append(o)
    return np.asarray(states), np.asarray(obs)


def particle_belief_to_histogram(particles, logw, bins) -> np.ndarray:
    """Weighted histogram of a particle set.

    ``bins`` is either the number of discrete states (particles are state
    indices) or an array of bin edges for scalar particles.
    """
    w = normalized_weights(np.asarray(logw, dtype=float))
    particles = np.asarray(particles)
    if np.ndim(bins) == 0:
        hist = np.bincount(particles.astype(int), weights=w, minlength=int(bins))
    else:
        idx = np.clip(np.digitize(particles.reshape(-1), bins) - 1, 0, len(bins) - 2)
        hist = np.bincount(idx, weights=w, minlength=len(bins) - 1)
    return hist / hist.sum()


# --------------------------------------------------------------------------
# Bootstrap particle filter
# --------------------------------------------------------------------------


@dataclass
class SmcResult:
    elbo: float
    step_terms: List[float]
    logw: List[np.ndarray]
    particles: List[np.ndarray]


def bootstrap_smc(sample_init: Callable, propagate: Callable, loglik: Callable,
                  obs: Sequence, actions: Sequence, K: int, rng: np.random.Generator,
                  resample: bool = True) -> SmcResult:
    """Generic bootstrap filter (proposal = transition prior).

    ``sample_init(K, rng)`` draws ``s_0``; ``propagate(particles, action,
    rng)`` samples transitions; ``loglik(particles, action, obs)`` gives the
    per-particle observation log-density, which is the log-weight.
    Ancestors at the first step are the identity; afterwards particles are
    resampled every step unless ``resample`` is false (the IWAE setting).
    """
    if K < 1:
        raise ContractError("need at least one particle")
    particles = sample_init(K, rng)
    logw = np.zeros(K)
    terms, weights, history = [], [], []
    for t in range(len(obs)):
        if t > 0 and resample:
            particles = particles[resample_ancestors(logw, rng)]
        particles = propagate(particles, actions[t], rng)
        step_logw = loglik(particles, actions[t], obs[t])
        logw = step_logw
        terms.append(float(elbo_term(step_logw)))
        weights.append(np.asarray(step_logw, dtype=float))
        history.append(particles.copy())
    if resample:
        total = float(np.sum(terms))
    else:
        total = float(iwae_elbo(weights))
    return SmcResult(total, terms, weights, history)


def lgss_bootstrap(model, obs, actions=None, K: int = 100, rng=None, resample: bool = True) -> SmcResult:
    obs = np.asarray(obs, dtype=float).reshape(len(obs), -1)
    T = len(obs)
    if actions is None:
        actions = np.zeros((T, model.action_dim))
    Lq = _sqrt_cov(model.Q)
    Lp = _sqrt_cov(model.prior_cov)
    Rinv = np.linalg.inv(model.R)
    _, logdetR = np.linalg.slogdet(model.R)
    m = model.obs_dim

    def sample_init(k, g):
        return model.prior_mean + g.standard_normal((k, model.state_dim)) @ Lp.T

    def propagate(p, a, g):
        mean = p @ model.A.T + model.B @ np.atleast_1d(a)
        return mean + g.standard_normal(p.shape) @ Lq.T

    def loglik(p, a, o):
        diff = o - p @ model.C.T
        return -0.5 * (m * math.log(2 * math.pi) + logdetR + np.einsum("ki,ij,kj->k", diff, Rinv, diff))

    return bootstrap_smc(sample_init, propagate, loglik, obs, actions, K, rng, resample)


def hmm_bootstrap(model, obs, actions=None, K: int = 1000, rng=None, resample: bool = True) -> SmcResult:
    T = len(obs)
    if actions is None:
        actions = np.zeros(T, dtype=int)
    log_em = np.log(np.where(model.emissions > 0, model.emissions, 1e-300))
    log_em[model.emissions == 0] = -np.inf

    def sample_init(k, g):
        cdf = np.cumsum(model.initial)
        return np.minimum(np.searchsorted(cdf, g.random(k) * cdf[-1], side="right"), model.n_states - 1)

    def propagate(p, a, g):
        cdf = np.cumsum(model.transitions[int(a)], -1)[p]
        u = g.random(len(p))[:, None] * cdf[:, -1:]
        return np.minimum((cdf <= u).sum(-1), model.n_states - 1)

    def loglik(p, a, o):
        return log_em[int(a)][p, int(o)]

    return bootstrap_smc(sample_init, propagate, loglik, obs, actions, K, rng, resample)


def _sqrt_cov(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))
