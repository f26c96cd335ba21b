"""n-step synchronous advantage actor-critic with a recurrent history encoder.

The training loop keeps the encoder latent across rollout segments without
recomputing it after parameter updates. Each segment runs on a fresh clone
of the parameter leaves, so gradients of later losses can flow back through
older segment graphs (which saw the older parameter values) into the current
leaves. The carried latent is detached once the retained chain would exceed
``n_g`` encoder steps.
"""
from __future__ import annotations

import collections
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .config import RunConfig, make_env
from .diffmath import (
    DTYPE,
    Categorical,
    DiagonalGaussian,
    Params,
    gaussian_entropy,
    gaussian_logpdf,
    init_linear,
    linear,
    make_leaves,
    positive_std,
    rmsprop_step,
)
from .encoders import DvrlEncoder, RnnEncoder, encode_action
from .envs import VecEnv
from .errors import ContractError, NumericalError, ShapeError
from .inference import ess

logger = logging.getLogger(__name__)

GROUPS = ("theta", "phi", "rho", "eta")
INIT_STD = 1.0


# --------------------------------------------------------------------------
# Policy and value heads
# --------------------------------------------------------------------------


class PolicyHead:
    """Categorical logits for discrete spaces, Gaussian mean + learned std otherwise."""

    def __init__(self, feature_dim: int, action_dim: Optional[int] = None,
                 n_actions: Optional[int] = None):
        if (action_dim is None) == (n_actions is None):
            raise ContractError("exactly one of action_dim / n_actions must be given")
        self.feature_dim = feature_dim
        self.action_dim = action_dim
        self.n_actions = n_actions

    @property
    def discrete(self) -> bool:
        return self.n_actions is not None

    def init_params(self, rng) -> Params:
        rho: Params = {}
        if self.discrete:
            init_linear(rho, "logits", self.feature_dim, self.n_actions, rng)
        else:
            init_linear(rho, "mean", self.feature_dim, self.action_dim, rng)
            # softplus(log(e - 1)) == 1
            rho["std_raw"] = torch.full((self.action_dim,), math.log(math.expm1(INIT_STD)), dtype=DTYPE)
        return rho

    def dist(self, rho: Params, features: torch.Tensor):
        if self.discrete:
            return Categorical(linear(features, rho["logits.w"], rho["logits.b"]))
        mean = linear(features, rho["mean.w"], rho["mean.b"])
        return DiagonalGaussian(mean, positive_std(rho["std_raw"]).expand_as(mean))

    def sample(self, dist, generator: torch.Generator) -> torch.Tensor:
        if self.discrete:
            return dist.sample(generator)
        noise = torch.randn(dist.mean.shape, generator=generator, dtype=DTYPE)
        return (dist.mean + dist.std * noise).detach()

    def greedy(self, dist) -> torch.Tensor:
        return dist.mode() if self.discrete else dist.mean.detach()

    def log_prob(self, dist, action) -> torch.Tensor:
        if self.discrete:
            return dist.log_prob(action)
        return gaussian_logpdf(action, dist)

    def entropy(self, dist) -> torch.Tensor:
        if self.discrete:
            return dist.entropy()
        return gaussian_entropy(dist)


class ValueHead:
    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim

    def init_params(self, rng) -> Params:
        eta: Params = {}
        init_linear(eta, "v", self.feature_dim, 1, rng)
        return eta

    def __call__(self, eta: Params, features: torch.Tensor) -> torch.Tensor:
        return linear(features, eta["v.w"], eta["v.b"]).squeeze(-1)


# --------------------------------------------------------------------------
# Targets and losses
# --------------------------------------------------------------------------


def compute_targets(rewards, dones, bootstrap_value, gamma: float) -> np.ndarray:
    """n-step value targets, backward from the detached bootstrap value.

    ``rewards[j]`` and ``dones[j]`` belong to the transition taken at step
    ``j``; a done flag zeroes everything after that transition.
    """
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    boot = np.asarray(bootstrap_value, dtype=float)
    if rewards.shape != dones.shape or rewards.ndim != 2 or boot.shape != rewards.shape[1:]:
        raise ContractError(
            f"compute_targets: rewards {rewards.shape}, dones {dones.shape}, bootstrap {boot.shape}")
    q = boot.copy()
    out = np.empty_like(rewards)
    for j in range(rewards.shape[0] - 1, -1, -1):
        q = gamma * q
        q = np.where(dones[j], 0.0, q)
        q = q + rewards[j]
        out[j] = q
    return out


@dataclass
class RolloutSegment:
    """One n-step rollout; per-step tensors have shape (n_s, n_e)."""

    observations: np.ndarray
    actions: list
    rewards: np.ndarray
    dones: np.ndarray
    log_probs: torch.Tensor
    values: torch.Tensor
    entropies: torch.Tensor
    elbo_terms: Optional[torch.Tensor]
    bootstrap_value: torch.Tensor
    latents: list = field(default_factory=list)
    ess: Optional[np.ndarray] = None

    @property
    def shape(self):
        return tuple(self.rewards.shape)


def a2c_losses(segment: RolloutSegment, targets):
    """Return ``(policy_loss, value_loss, entropy_loss)`` averaged over n_s * n_e."""
    targets = torch.as_tensor(np.asarray(targets, dtype=float), dtype=DTYPE)
    if targets.shape != segment.values.shape or segment.log_probs.shape != segment.values.shape:
        raise ContractError(
            f"a2c_losses: targets {tuple(targets.shape)}, values {tuple(segment.values.shape)}, "
            f"log_probs {tuple(segment.log_probs.shape)}")
    adv = targets - segment.values
    policy_loss = -(segment.log_probs * adv.detach()).mean()
    value_loss = (adv * adv).mean()
    entropy_loss = -segment.entropies.mean()
    return policy_loss, value_loss, entropy_loss


def elbo_loss(segment: RolloutSegment) -> torch.Tensor:
    """Negative mean of the per-step ELBO terms (or reconstruction log-likelihoods)."""
    if segment.elbo_terms is None:
        raise ContractError("segment has no ELBO terms (RNN encoder without reconstruction loss)")
    return -segment.elbo_terms.mean()


def joint_loss(policy_loss, entropy_loss, value_loss, elbo, lambda_h: float, lambda_v: float,
               lambda_e: float):
    total = policy_loss + lambda_h * entropy_loss + lambda_v * value_loss
    if elbo is not None:
        total = total + lambda_e * elbo
    return total


# --------------------------------------------------------------------------
# Agent
# --------------------------------------------------------------------------


class Agent:
    """Encoder + policy + value over one environment's spaces."""

    def __init__(self, config: RunConfig, env):
        self.config = config
        enc = config.encoder
        self.discrete = env.n_actions is not None
        self.action_dim = env.action_dim
        self.n_actions = env.n_actions
        action_in = env.n_actions if self.discrete else env.action_dim
        if enc.kind == "dvrl":
            self.encoder = DvrlEncoder(env.obs_dim, action_in, enc.K, enc.d_h, enc.d_z,
                                       enc.obs_embed, enc.action_embed)
        else:
            self.encoder = RnnEncoder(env.obs_dim, action_in, enc.rnn_d_h, enc.obs_embed,
                                      enc.action_embed, recon=enc.recon_loss)
        self.policy = PolicyHead(self.encoder.feature_dim, None if self.discrete else env.action_dim,
                                 env.n_actions)
        self.value = ValueHead(self.encoder.feature_dim)
        self.no_op = env.no_op

    def init_params(self, seed: int) -> Dict[str, Params]:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
        params = {"theta": {}, "phi": {}}
        params.update(self.encoder.init_params(rng))
        params["rho"] = self.policy.init_params(rng)
        params["eta"] = self.value.init_params(rng)
        return {g: make_leaves(params[g]) for g in GROUPS}

    def encode_actions(self, actions) -> torch.Tensor:
        return encode_action(actions, self.action_dim, self.n_actions)

    def no_op_batch(self, n: int) -> np.ndarray:
        return np.stack([np.asarray(self.no_op, dtype=float)] * n) if not self.discrete \
            else np.zeros(n, dtype=int)


def clone_params(params: Dict[str, Params]) -> Dict[str, Params]:
    return {g: {k: v.clone() for k, v in ps.items()} for g, ps in params.items()}


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    frames: int
    segment: int
    wall_time: Optional[float]
    mean_return: float
    loss_policy: float
    loss_value: float
    loss_entropy: float
    loss_elbo: float
    ess_mean: float
    grad_norm: float
    seed: int


class TrainingDiverged(NumericalError):
    def __init__(self, message, diagnostics: dict):
        super().__init__(message, step=diagnostics.get("frames"))
        self.diagnostics = diagnostics


# --------------------------------------------------------------------------
# Trainer
# --------------------------------------------------------------------------


class Trainer:
    """Owns the parameters, optimizer state, environments and the carried latent."""

    def __init__(self, config: RunConfig, env=None):
        self.config = config.validate()
        t = config.train
        self.env = make_env(config.env) if env is None else env
        self.agent = Agent(config, self.env)
        self.params = self.agent.init_params(t.seed)
        self.opt_state: Dict[str, torch.Tensor] = {}
        self.generator = torch.Generator().manual_seed(int(t.seed))
        self.venv = VecEnv(self.env, t.n_e, t.seed)
        self.obs = self.venv.reset()
        with torch.no_grad():
            self.latent = self.agent.encoder.initial_state(self.params, t.n_e)
        self.prev_action = self.agent.no_op_batch(t.n_e)
        self.chain_steps = 0
        self.frames = 0
        self.segment_index = 0
        self.returns = collections.deque(maxlen=config.log.return_window)
        self.episodes = 0
        self.last_segment: Optional[RolloutSegment] = None
        self.segment_start_latent = None
        self._t0 = time.perf_counter()

    @property
    def batch_size(self) -> int:
        return self.config.train.n_e * self.config.train.n_s

    @property
    def at_cut(self) -> bool:
        """True when the carried latent holds no graph (safe point for checkpoints)."""
        return self.chain_steps == 0

    def _all_leaves(self):
        return {f"{g}.{k}": v for g in GROUPS for k, v in self.params[g].items()}

    def rollout(self, view: Dict[str, Params]) -> RolloutSegment:
        t = self.config.train
        agent, enc = self.agent, self.agent.encoder
        latent = self.latent
        self.segment_start_latent = latent
        prev_action = self.prev_action
        obs_seq, act_seq, rew_seq, done_seq = [], [], [], []
        logps, values, ents, elbos, latents, ess_vals = [], [], [], [], [], []
        for _ in range(t.n_s):
            obs_t = torch.as_tensor(self.obs, dtype=DTYPE)
            latent, aux = enc.step(view, latent, agent.encode_actions(prev_action), obs_t, self.generator)
            latents.append(latent)
            feats = enc.features(latent)
            if not t.joint_optim:
                feats = feats.detach()
            dist = agent.policy.dist(view["rho"], feats)
            action = agent.policy.sample(dist, self.generator)
            logps.append(agent.policy.log_prob(dist, action))
            ents.append(agent.policy.entropy(dist))
            values.append(agent.value(view["eta"], feats))
            if aux is not None:
                elbos.append(aux if enc.kind == "dvrl" else -aux)
            if enc.kind == "dvrl":
                ess_vals.append(ess(latent.logw).numpy())

            act_np = action.numpy()
            next_obs, rewards, dones = self.venv.step(list(act_np))
            for r in self.venv.completed_returns:
                self.returns.append(r)
                self.episodes += 1
            obs_seq.append(self.obs)
            act_seq.append(act_np)
            rew_seq.append(rewards)
            done_seq.append(dones)
            # reset handling: keep `latent` for V(s_j); carry the re-initialized one
            prev_action = act_np.copy()
            if dones.any():
                prev_action[dones] = agent.no_op_batch(int(dones.sum()))
                latent = enc.reset_where(view, latent, dones)
            self.obs = next_obs

        with torch.no_grad():
            boot_latent, _ = enc.step(view, latent, agent.encode_actions(prev_action),
                                      torch.as_tensor(self.obs, dtype=DTYPE), self.generator)
            boot_value = agent.value(view["eta"], enc.features(boot_latent))
        self.latent = latent
        self.prev_action = prev_action
        return RolloutSegment(
            observations=np.asarray(obs_seq),
            actions=act_seq,
            rewards=np.asarray(rew_seq),
            dones=np.asarray(done_seq),
            log_probs=torch.stack(logps),
            values=torch.stack(values),
            entropies=torch.stack(ents),
            elbo_terms=torch.stack(elbos) if elbos else None,
            bootstrap_value=boot_value,
            latents=latents,
            ess=np.asarray(ess_vals) if ess_vals else None,
        )

    def train_segment(self) -> MetricsRecord:
        t = self.config.train
        view = clone_params(self.params)
        seg = self.rollout(view)
        targets = compute_targets(seg.rewards, seg.dones, seg.bootstrap_value.numpy(), t.gamma)
        l_a, l_v, l_h = a2c_losses(seg, targets)
        l_e = elbo_loss(seg) if seg.elbo_terms is not None else None
        total = joint_loss(l_a, l_h, l_v, l_e, t.lambda_h, t.lambda_v, t.lambda_e)

        self.chain_steps += t.n_s
        cut = self.chain_steps + t.n_s > t.n_g
        leaves = self._all_leaves()
        names = list(leaves)
        if not math.isfinite(total.item()):
            raise TrainingDiverged("non-finite loss", self._diagnostics(seg, l_a, l_v, l_h, l_e))
        grads = torch.autograd.grad(total, [leaves[n] for n in names], retain_graph=not cut,
                                    allow_unused=True)
        grad_map = {n: g for n, g in zip(names, grads)}
        grad_norm = rmsprop_step(leaves, grad_map, self.opt_state, t.lr, t.rms_alpha,
                                 max_grad_norm=t.max_grad_norm)
        if not math.isfinite(grad_norm):
            raise TrainingDiverged("non-finite gradient", self._diagnostics(seg, l_a, l_v, l_h, l_e))
        if cut:
            self.latent = self.agent.encoder.detach(self.latent)
            self.chain_steps = 0

        self.frames += self.batch_size
        self.segment_index += 1
        self.last_segment = seg
        return MetricsRecord(
            frames=self.frames,
            segment=self.segment_index,
            wall_time=(time.perf_counter() - self._t0) if self.config.log.wall_time else None,
            mean_return=float(np.mean(self.returns)) if self.returns else float("nan"),
            loss_policy=l_a.item(),
            loss_value=l_v.item(),
            loss_entropy=l_h.item(),
            loss_elbo=l_e.item() if l_e is not None else float("nan"),
            ess_mean=float(seg.ess.mean()) if seg.ess is not None else float("nan"),
            grad_norm=grad_norm,
            seed=self.config.train.seed,
        )

    def _diagnostics(self, seg, l_a, l_v, l_h, l_e) -> dict:
        diag = {
            "frames": self.frames,
            "segment": self.segment_index,
            "loss_policy": l_a.item(),
            "loss_value": l_v.item(),
            "loss_entropy": l_h.item(),
            "loss_elbo": None if l_e is None else l_e.item(),
            "ess_mean": None if seg.ess is None else float(np.nanmean(seg.ess)),
        }
        logger.error("training diverged: %s", diag)
        return diag

    def run(self, total_frames: Optional[int] = None,
            callback: Optional[Callable[[MetricsRecord, "Trainer"], None]] = None) -> List[MetricsRecord]:
        total = self.config.train.total_frames if total_frames is None else total_frames
        records = []
        while self.frames + self.batch_size <= total:
            rec = self.train_segment()
            records.append(rec)
            if callback is not None:
                callback(rec, self)
        return records


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def evaluate(agent: Agent, params: Dict[str, Params], env, episodes: int = 100, seed: int = 0,
             greedy: bool = False):
    """Undiscounted episode returns of the policy; returns ``(mean, std, returns)``."""
    if env.obs_dim != agent.encoder.obs_dim:
        raise ContractError("environment does not match the checkpoint's observation space")
    if (env.n_actions is not None) != agent.discrete:
        raise ContractError("environment does not match the checkpoint's action space")
    generator = torch.Generator().manual_seed(int(seed))
    venv = VecEnv(env, 1, seed)
    returns = []
    with torch.no_grad():
        obs = venv.reset()
        latent = agent.encoder.initial_state(params, 1)
        prev = agent.no_op_batch(1)
        while len(returns) < episodes:
            latent, _ = agent.encoder.step(params, latent, agent.encode_actions(prev),
                                           torch.as_tensor(obs, dtype=DTYPE), generator)
            dist = agent.policy.dist(params["rho"], agent.encoder.features(latent))
            action = agent.policy.greedy(dist) if greedy else agent.policy.sample(dist, generator)
            act_np = action.numpy()
            obs, _, dones = venv.step(list(act_np))
            prev = act_np.copy()
            if dones[0]:
                returns.extend(venv.completed_returns)
                latent = agent.encoder.initial_state(params, 1)
                prev = agent.no_op_batch(1)
    returns = np.asarray(returns[:episodes])
    return float(returns.mean()), float(returns.std()), returns
