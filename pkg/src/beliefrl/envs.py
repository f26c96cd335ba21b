"""POMDP environments and a vectorized stepper.

Every environment exposes the same small protocol used by :class:`VecEnv`:

* ``obs_dim`` and either ``action_dim`` (continuous) or ``n_actions`` (discrete)
* ``horizon`` (episode length)
* ``reset(rng) -> (state, obs_vector)``
* ``transition(state, action, rng) -> (state', obs_vector, reward)``
* ``no_op`` action used for ``a_0`` and after resets

Passing ``rng=None`` to any stochastic step switches all noise off, which the
tests use to pin exact transitions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ShapeError


# --------------------------------------------------------------------------
# Mountain Hike
# --------------------------------------------------------------------------


@dataclass
class MountainHikeParams:
    """Mountain Hike constants.

    ``transition_cov`` and ``obs_noise`` are covariance scales, so the per-axis
    noise standard deviations are ``sqrt(transition_cov)`` and ``sqrt(obs_noise)``.

    The reward surface is a surrogate: ``-ridge_slope * dist(p, ridge) - basin``,
    where ``ridge`` is the polyline through ``ridge_points``. It is Lipschitz
    with constant ``ridge_slope``.
    """

    transition_cov: float = 0.25
    obs_noise: float = 3.0
    step_cap: float = 0.5
    action_penalty: float = 0.01
    horizon: int = 75
    start_mean: Tuple[float, float] = (-8.5, -8.5)
    start_cov: float = 1.0
    ridge_points: Tuple[Tuple[float, float], ...] = ((-10.0, -10.0), (-2.0, -6.0), (10.0, 10.0))
    ridge_slope: float = 0.1
    basin: float = 0.0

    def __post_init__(self):
        if self.obs_noise < 0:
            raise ContractError("obs_noise (sigma_o) must be >= 0")
        if self.step_cap <= 0:
            raise ContractError("step_cap must be > 0")
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")
        self.start_mean = tuple(float(v) for v in self.start_mean)
        self.ridge_points = tuple(tuple(float(c) for c in p) for p in self.ridge_points)
        if len(self.ridge_points) < 2:
            raise ContractError("ridge needs at least two points")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_mean"] = list(self.start_mean)
        d["ridge_points"] = [list(p) for p in self.ridge_points]
        return d


def distance_to_polyline(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Euclidean distance from each row of ``points`` (N, 2) to a polyline (M, 2)."""
    p = np.atleast_2d(points)[:, None, :]
    a = polyline[:-1][None]
    b = polyline[1:][None]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.sqrt(((p - proj) ** 2).sum(-1)).min(-1)


def mountain_hike_reward_surface(x, y, params: Optional[MountainHikeParams] = None):
    params = params or MountainHikeParams()
    pts = np.stack(np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float)), -1)
    d = distance_to_polyline(pts.reshape(-1, 2), np.asarray(params.ridge_points))
    r = -params.ridge_slope * d - params.basin
    return r.reshape(pts.shape[:-1]) if pts.ndim > 1 else float(r[0])


def cap_step(action: np.ndarray, cap: float) -> np.ndarray:
    norm = float(np.linalg.norm(action))
    if norm > cap:
        return action * (cap / norm)
    return action


def mountain_hike_step(state, action, rng: Optional[np.random.Generator],
                       params: Optional[MountainHikeParams] = None, t: int = 0):
    """One Mountain Hike transition from step count ``t``.

    Returns ``(state', obs, reward, done)``; ``done`` is true once ``t + 1``
    reaches the horizon. The action penalty uses the raw (uncapped) norm.
    """
    params = params or MountainHikeParams()
    state = np.asarray(state, dtype=float)
    action = np.asarray(action, dtype=float)
    if state.shape != (2,) or action.shape != (2,):
        raise ShapeError("Mountain Hike state and action must both have shape (2,)")
    if not (np.isfinite(state).all() and np.isfinite(action).all()):
        raise ContractError("Mountain Hike step received non-finite state or action")
    applied = cap_step(action, params.step_cap)
    if rng is None:
        eps_s = np.zeros(2)
        eps_o = np.zeros(2)
    else:
        eps_s = rng.standard_normal(2) * math.sqrt(params.transition_cov)
        eps_o = rng.standard_normal(2) * math.sqrt(params.obs_noise)
    new_state = state + applied + eps_s
    obs = new_state + eps_o
    reward = mountain_hike_reward_surface(new_state[0], new_state[1], params) \
        - params.action_penalty * float(np.linalg.norm(action))
    return new_state, obs, reward, t + 1 >= params.horizon


class MountainHike:
    obs_dim = 2
    action_dim = 2
    n_actions = None

    def __init__(self, params: Optional[MountainHikeParams] = None):
        self.params = params or MountainHikeParams()
        self.horizon = self.params.horizon
        self.no_op = np.zeros(2)

    def reset(self, rng):
        p = self.params
        mean = np.asarray(p.start_mean)
        if rng is None:
            return mean.copy(), mean.copy()
        state = mean + rng.standard_normal(2) * math.sqrt(p.start_cov)
        obs = state + rng.standard_normal(2) * math.sqrt(p.obs_noise)
        return state, obs

    def transition(self, state, action, rng):
        new_state, obs, reward, _ = mountain_hike_step(state, action, rng, self.params)
        return new_state, obs, reward


# --------------------------------------------------------------------------
# Flickering
# --------------------------------------------------------------------------


def flicker_wrap(obs, rng: np.random.Generator, p_blank: float = 0.5):
    """Replace ``obs`` by zeros of the same shape with probability ``p_blank``."""
    if not 0.0 <= p_blank <= 1.0:
        raise ContractError("p_blank must lie in [0, 1]")
    obs = np.asarray(obs, dtype=float)
    if rng.random() < p_blank:
        return np.zeros_like(obs)
    return obs


class Flicker:
    """Environment wrapper applying :func:`flicker_wrap` to every observation."""

    def __init__(self, env, p_blank: float = 0.5):
        if not 0.0 <= p_blank <= 1.0:
            raise ContractError("p_blank must lie in [0, 1]")
        self.env = env
        self.p_blank = p_blank
        self.obs_dim = env.obs_dim
        self.action_dim = env.action_dim
        self.n_actions = env.n_actions
        self.horizon = env.horizon
        self.no_op = env.no_op

    def reset(self, rng):
        state, obs = self.env.reset(rng)
        return state, self._flicker(obs, rng)

    def transition(self, state, action, rng):
        state, obs, reward = self.env.transition(state, action, rng)
        return state, self._flicker(obs, rng), reward

    def _flicker(self, obs, rng):
        if rng is None:
            return obs
        return flicker_wrap(obs, rng, self.p_blank)


# --------------------------------------------------------------------------
# Linear-Gaussian state-space model
# --------------------------------------------------------------------------


def _is_spd(m: np.ndarray) -> bool:
    if not np.allclose(m, m.T, atol=1e-12):
        return False
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass
class LinearGaussianSSM:
    """``s' = A s + B a + eps``, ``o = C s' + delta`` with Gaussian noise.

    Scalars are promoted to 1x1 matrices, so ``LinearGaussianSSM(A=0.9, C=1,
    Q=0.3, R=0.5)`` is a valid 1-D model.
    """

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    B: Optional[np.ndarray] = None
    prior_mean: Optional[np.ndarray] = None
    prior_cov: Optional[np.ndarray] = None
    horizon: int = 25

    n_actions = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.C.shape[1] != n:
            raise ShapeError(f"inconsistent A {self.A.shape} / C {self.C.shape}")
        m = self.C.shape[0]
        if self.Q.shape != (n, n) or self.R.shape != (m, m):
            raise ShapeError("noise covariances do not match state/observation dims")
        self.B = np.zeros((n, 1)) if self.B is None else np.atleast_2d(np.asarray(self.B, dtype=float))
        if self.B.shape[0] != n:
            raise ShapeError(f"B has {self.B.shape[0]} rows, expected {n}")
        self.prior_mean = np.zeros(n) if self.prior_mean is None else np.atleast_1d(np.asarray(self.prior_mean, float))
        self.prior_cov = np.eye(n) if self.prior_cov is None else np.atleast_2d(np.asarray(self.prior_cov, float))
        # Q may be PSD-singular (noise-free transitions) but R and prior must be SPD
        for name in ("R", "prior_cov"):
            if not _is_spd(getattr(self, name)):
                raise ContractError(f"{name} must be symmetric positive definite")
        if not np.allclose(self.Q, self.Q.T) or np.linalg.eigvalsh(self.Q).min() < -1e-12:
            raise ContractError("Q must be symmetric positive semi-definite")
        self.state_dim = n
        self.obs_dim = m
        self.action_dim = self.B.shape[1]
        self.no_op = np.zeros(self.action_dim)

    def reset(self, rng):
        if rng is None:
            state = self.prior_mean.copy()
        else:
            state = rng.multivariate_normal(self.prior_mean, self.prior_cov)
        return state, self.observe(state, rng)

    def observe(self, state, rng):
        mean = self.C @ state
        if rng is None:
            return mean
        return mean + _gaussian_noise(self.R, rng)

    def transition(self, state, action, rng):
        new_state, obs = lgss_step(self, state, action, rng)
        return new_state, obs, 0.0


def _gaussian_noise(cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # eigh tolerates the PSD-singular case
    w, v = np.linalg.eigh(cov)
    return v @ (np.sqrt(np.clip(w, 0.0, None)) * rng.standard_normal(len(w)))


def lgss_step(model: LinearGaussianSSM, state, action, rng):
    state = np.atleast_1d(np.asarray(state, dtype=float))
    action = np.atleast_1d(np.asarray(action, dtype=float))
    if state.shape != (model.state_dim,) or action.shape != (model.action_dim,):
        raise ShapeError(
            f"expected state {(model.state_dim,)} and action {(model.action_dim,)}, "
            f"got {state.shape} and {action.shape}"
        )
    new_state = model.A @ state + model.B @ action
    if rng is not None:
        new_state = new_state + _gaussian_noise(model.Q, rng)
    return new_state, model.observe(new_state, rng)


# --------------------------------------------------------------------------
# Discrete HMM
# --------------------------------------------------------------------------


def _check_stochastic(m: np.ndarray, name: str) -> None:
    if (m < 0).any() or not np.allclose(m.sum(-1), 1.0, rtol=0.0, atol=1e-12):
        raise ContractError(f"{name}: every row must be a probability vector")


@dataclass
class DiscreteHMM:
    """Finite POMDP with per-action transition and observation matrices.

    ``transitions[a, s, s']`` is ``F(s'|s, a)``; ``emissions[a, s', o]`` is
    ``U(o|s', a)``; ``rewards[a, s']`` is the (deterministic) reward.
    Single matrices (no action axis) are shared by all actions.
    """

    transitions: np.ndarray
    emissions: np.ndarray
    initial: np.ndarray
    rewards: Optional[np.ndarray] = None
    horizon: int = 20

    action_dim = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.emissions = np.asarray(self.emissions, dtype=float)
        self.initial = np.asarray(self.initial, dtype=float)
        if self.transitions.ndim == 2:
            self.transitions = self.transitions[None]
        if self.emissions.ndim == 2:
            self.emissions = np.broadcast_to(
                self.emissions, (self.transitions.shape[0],) + self.emissions.shape).copy()
        n_a, n_s, n_s2 = self.transitions.shape
        if n_s != n_s2 or self.emissions.shape[:2] != (n_a, n_s) or self.initial.shape != (n_s,):
            raise ShapeError("inconsistent HMM matrix shapes")
        _check_stochastic(self.transitions, "transitions")
        _check_stochastic(self.emissions, "emissions")
        _check_stochastic(self.initial, "initial")
        self.rewards = np.zeros((n_a, n_s)) if self.rewards is None else np.asarray(self.rewards, float)
        self.n_states = n_s
        self.n_actions = n_a
        self.n_obs = self.emissions.shape[2]
        self.obs_dim = self.n_obs
        self.no_op = 0

    def one_hot(self, obs: int) -> np.ndarray:
        v = np.zeros(self.n_obs)
        v[obs] = 1.0
        return v

    def reset(self, rng):
        state = int(rng.choice(self.n_states, p=self.initial))
        obs = int(rng.choice(self.n_obs, p=self.emissions[0, state]))
        return state, self.one_hot(obs)

    def transition(self, state, action, rng):
        new_state, obs = hmm_step(self, state, action, rng)
        return new_state, self.one_hot(obs), float(self.rewards[int(action), new_state])


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    # inverse CDF, one uniform per draw
    return int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"), len(p) - 1))


def hmm_step(model: DiscreteHMM, state: int, action: int, rng: np.random.Generator):
    if not (0 <= int(state) < model.n_states) or not (0 <= int(action) < model.n_actions):
        raise ContractError(f"invalid state {state} or action {action}")
    new_state = _draw(model.transitions[int(action), int(state)], rng)
    obs = _draw(model.emissions[int(action), new_state], rng)
    return new_state, obs


# --------------------------------------------------------------------------
# Vectorized stepping
# --------------------------------------------------------------------------


def env_rng(seed: int, index: int) -> np.random.Generator:
    """Independent, reproducible stream for environment ``index``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


@dataclass
class VecEnvState:
    states: list
    steps: np.ndarray
    rngs: list
    obs: np.ndarray
    episode_returns: np.ndarray = field(default=None)


class VecEnv:
    """``n_envs`` copies of one environment with auto-reset.

    :meth:`step` returns the observation that follows each action; for an
    environment whose episode just ended this is already the first
    observation of the new episode (the terminal observation is kept in
    ``last_terminal_obs``), matching the usual A2C convention that the next
    encoder step starts from a freshly reset latent.
    """

    def __init__(self, env, n_envs: int, seed: int):
        self.env = env
        self.n_envs = n_envs
        self.seed = seed
        self.state: Optional[VecEnvState] = None
        self.last_terminal_obs = None
        self.completed_returns: list = []

    @property
    def horizon(self):
        return self.env.horizon

    def reset(self) -> np.ndarray:
        rngs = [env_rng(self.seed, i) for i in range(self.n_envs)]
        states, obs = [], []
        for rng in rngs:
            s, o = self.env.reset(rng)
            states.append(s)
            obs.append(o)
        self.state = VecEnvState(states, np.zeros(self.n_envs, dtype=int), rngs,
                                 np.asarray(obs, dtype=float), np.zeros(self.n_envs))
        return self.state.obs.copy()

    def step(self, actions: Sequence):
        st = self.state
        if st is None:
            raise ContractError("call reset() before step()")
        if len(actions) != self.n_envs:
            raise ContractError(f"expected {self.n_envs} actions, got {len(actions)}")
        obs = np.empty_like(st.obs)
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs, dtype=bool)
        self.last_terminal_obs = {}
        self.completed_returns = []
        for i in range(self.n_envs):
            s, o, r = self.env.transition(st.states[i], actions[i], st.rngs[i])
            st.steps[i] += 1
            st.episode_returns[i] += r
            rewards[i] = r
            if st.steps[i] >= self.env.horizon:
                dones[i] = True
                self.last_terminal_obs[i] = o
                self.completed_returns.append(float(st.episode_returns[i]))
                st.episode_returns[i] = 0.0
                st.steps[i] = 0
                s, o = self.env.reset(st.rngs[i])
            st.states[i] = s
            obs[i] = o
        st.obs = obs
        return obs.copy(), rewards, dones

    def get_state(self) -> dict:
        st = self.state
        return {
            "states": [s if np.ndim(s) == 0 else np.asarray(s, dtype=float).tolist()
                       for s in st.states],
            "steps": st.steps.tolist(),
            "rngs": [r.bit_generator.state for r in st.rngs],
            "obs": st.obs.tolist(),
            "episode_returns": st.episode_returns.tolist(),
        }

    def set_state(self, d: dict) -> None:
        rngs = []
        for s in d["rngs"]:
            r = np.random.default_rng()
            r.bit_generator.state = s
            rngs.append(r)
        states = [np.asarray(s, dtype=float) if np.ndim(s) else int(s) for s in d["states"]]
        self.state = VecEnvState(states, np.asarray(d["steps"], dtype=int), rngs,
                                 np.asarray(d["obs"], dtype=float),
                                 np.asarray(d["episode_returns"], dtype=float))
