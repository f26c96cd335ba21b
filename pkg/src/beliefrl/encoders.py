"""History encoders: the GRU baseline and the particle-belief (DVRL) encoder.

Parameters are plain ``{name: tensor}`` dictionaries grouped as ``theta``
(generative model, embedders, RNNs) and ``phi`` (proposal). The encoder
objects only hold architecture sizes, so the same encoder can be evaluated
with any copy of the parameters.

Shapes: ``B`` is the batch (parallel environments), ``K`` the particle count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .diffmath import (
    DTYPE,
    DiagonalGaussian,
    Params,
    as_value,
    gaussian_logpdf,
    gru_input_projection,
    gru_step,
    init_gru,
    init_linear,
    init_mlp,
    linear,
    mlp,
    positive_std,
    relu,
    reparam_sample,
)
from .errors import ContractError, ShapeError
from .inference import elbo_term, resample_ancestors


def encode_action(action, action_dim: Optional[int], n_actions: Optional[int]) -> torch.Tensor:
    """Actions as float rows: one-hot for discrete spaces, raw vectors otherwise."""
    if n_actions is not None:
        idx = torch.as_tensor(np.asarray(action), dtype=torch.long).reshape(-1)
        return torch.nn.functional.one_hot(idx, n_actions).to(DTYPE)
    a = as_value(action)
    return a.reshape(-1, action_dim)


def _gaussian_head(params: Params, prefix: str, x: torch.Tensor) -> DiagonalGaussian:
    """One joint ReLU layer followed by separate mean and softplus-std heads."""
    hidden = relu(linear(x, params[prefix + "joint.w"], params[prefix + "joint.b"]))
    mean = linear(hidden, params[prefix + "mean.w"], params[prefix + "mean.b"])
    std = positive_std(linear(hidden, params[prefix + "std.w"], params[prefix + "std.b"]))
    return DiagonalGaussian(mean, std)


def _init_gaussian_head(params: Params, prefix: str, n_in: int, hidden: int, n_out: int, rng) -> None:
    init_linear(params, prefix + "joint", n_in, hidden, rng)
    init_linear(params, prefix + "mean", hidden, n_out, rng)
    init_linear(params, prefix + "std", hidden, n_out, rng)


# --------------------------------------------------------------------------
# RNN baseline
# --------------------------------------------------------------------------


class RnnEncoder:
    """``h_t = GRU(h_{t-1}, [phi_o(o_t), phi_a(a_{t-1})])`` with optional reconstruction loss."""

    kind = "rnn"

    def __init__(self, obs_dim: int, action_in_dim: int, hidden: int = 256,
                 obs_embed: int = 64, action_embed: int = 64, recon: bool = False):
        self.obs_dim = obs_dim
        self.action_in_dim = action_in_dim
        self.hidden = hidden
        self.obs_embed = obs_embed
        self.action_embed = action_embed
        self.recon = recon

    @property
    def feature_dim(self) -> int:
        return self.hidden

    def init_params(self, rng: np.random.Generator) -> Dict[str, Params]:
        theta: Params = {}
        init_mlp(theta, "obs_embed.", [self.obs_dim, self.obs_embed, self.obs_embed], rng)
        init_mlp(theta, "act_embed.", [self.action_in_dim, self.action_embed], rng)
        init_gru(theta, "rnn.", self.obs_embed + self.action_embed, self.hidden, rng)
        if self.recon:
            _init_gaussian_head(theta, "decoder.", self.hidden, self.hidden, self.obs_dim, rng)
        return {"theta": theta}

    def initial_state(self, params: Dict[str, Params], batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.hidden, dtype=DTYPE)

    def features(self, state: torch.Tensor) -> torch.Tensor:
        return state

    def step(self, params: Dict[str, Params], state: torch.Tensor, a_prev: torch.Tensor,
             obs: torch.Tensor, generator: Optional[torch.Generator] = None):
        """Returns ``(h', recon_loss)``; ``recon_loss`` is ``None`` unless enabled."""
        theta = params["theta"]
        if obs.shape[-1] != self.obs_dim or a_prev.shape[-1] != self.action_in_dim:
            raise ShapeError("rnn_encoder_step: observation or action dim mismatch")
        xo = mlp(theta, obs, "obs_embed.", 2)
        xa = mlp(theta, a_prev, "act_embed.", 1)
        recon = None
        if self.recon:
            recon = -gaussian_logpdf(obs, _gaussian_head(theta, "decoder.", state))
        return gru_step(theta, state, torch.cat([xo, xa], -1), prefix="rnn."), recon

    def reset_where(self, params, state: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
        if not mask.any():
            return state
        init = self.initial_state(params, state.shape[0])
        m = torch.as_tensor(mask).reshape(-1, 1)
        return torch.where(m, init, state)

    def detach(self, state: torch.Tensor) -> torch.Tensor:
        return state.detach()


def rnn_encoder_step(encoder: RnnEncoder, params, latent, a_prev, obs):
    """Functional form of :meth:`RnnEncoder.step`."""
    return encoder.step(params, latent, a_prev, obs)


# --------------------------------------------------------------------------
# Particle belief
# --------------------------------------------------------------------------


@dataclass
class ParticleBelief:
    """K weighted particles per batch row plus the summary vector."""

    h: torch.Tensor        # (B, K, d_h)
    z: torch.Tensor        # (B, K, d_z)
    logw: torch.Tensor     # (B, K)
    summary: torch.Tensor  # (B, d_h)

    def __post_init__(self):
        b, k = self.logw.shape
        if self.h.shape[:2] != (b, k) or self.z.shape[:2] != (b, k):
            raise ShapeError("particle fields disagree on batch or particle count")

    @property
    def num_particles(self) -> int:
        return self.logw.shape[-1]

    def detach(self) -> "ParticleBelief":
        return ParticleBelief(self.h.detach(), self.z.detach(), self.logw.detach(), self.summary.detach())

    def where(self, mask, other: "ParticleBelief") -> "ParticleBelief":
        """Rows of ``other`` where ``mask`` is true, rows of ``self`` elsewhere."""
        m = torch.as_tensor(np.asarray(mask, dtype=bool))
        return ParticleBelief(
            torch.where(m.view(-1, 1, 1), other.h, self.h),
            torch.where(m.view(-1, 1, 1), other.z, self.z),
            torch.where(m.view(-1, 1), other.logw, self.logw),
            torch.where(m.view(-1, 1), other.summary, self.summary),
        )


class DvrlModel:
    """Interface the particle update needs from a generative model + proposal.

    ``h`` and ``z`` carry trailing feature axes; ``xa``/``xo`` are embedded
    action and observation broadcast against the particle axis.
    """

    def embed_obs(self, obs): raise NotImplementedError
    def embed_action(self, a): raise NotImplementedError
    def embed_z(self, z): raise NotImplementedError
    def transition(self, h, xa) -> DiagonalGaussian: raise NotImplementedError
    def proposal(self, h, xa, xo) -> DiagonalGaussian: raise NotImplementedError
    def decoder(self, h, z, xz, xa) -> DiagonalGaussian: raise NotImplementedError
    def rnn(self, h, xz, xo, xa): raise NotImplementedError
    def summarize(self, h, xz, logw): raise NotImplementedError


def dvrl_encoder_step(belief: ParticleBelief, a_prev, obs, model: DvrlModel,
                      generator: Optional[torch.Generator] = None,
                      ancestors: Optional[torch.Tensor] = None,
                      noise: Optional[torch.Tensor] = None) -> Tuple[ParticleBelief, torch.Tensor]:
    """One particle-belief update; returns ``(belief', elbo_term)`` with ``elbo_term`` of shape (B,).

    ``ancestors`` and ``noise`` may be supplied to freeze the random choices
    (gradient checks, replay); otherwise they are drawn from ``generator``
    in that order: ancestor uniforms first, then proposal noise.
    Gradients do not flow through the ancestor choice.
    """
    B, K = belief.logw.shape
    if obs.shape[0] != B or a_prev.shape[0] != B:
        raise ShapeError(f"batch mismatch: belief {B}, obs {obs.shape[0]}, action {a_prev.shape[0]}")
    if ancestors is None:
        ancestors = resample_ancestors(belief.logw, generator)
    ancestors = torch.as_tensor(ancestors, dtype=torch.long)
    h_prev = torch.gather(belief.h, 1, ancestors.unsqueeze(-1).expand(-1, -1, belief.h.shape[-1]))

    xo = model.embed_obs(obs).unsqueeze(1).expand(B, K, -1)
    xa = model.embed_action(a_prev).unsqueeze(1).expand(B, K, -1)
    q = model.proposal(h_prev, xa, xo)
    if noise is None:
        noise = torch.randn(q.mean.shape, generator=generator, dtype=DTYPE)
    z = reparam_sample(q, noise)

    xz = model.embed_z(z)
    prior = model.transition(h_prev, xa)
    dec = model.decoder(h_prev, z, xz, xa)
    obs_k = obs.unsqueeze(1).expand(B, K, -1)
    logw = gaussian_logpdf(z, prior) + gaussian_logpdf(obs_k, dec) - gaussian_logpdf(z, q)

    h = model.rnn(h_prev, xz, xo, xa)
    summary = model.summarize(h, xz, logw)
    return ParticleBelief(h, z, logw, summary), elbo_term(logw)


class NeuralDvrlModel(DvrlModel):
    """The learned generative model and proposal bound to one parameter copy."""

    def __init__(self, encoder: "DvrlEncoder", params: Dict[str, Params]):
        self.enc = encoder
        self.theta = params["theta"]
        self.phi = params["phi"]

    def embed_obs(self, obs):
        return mlp(self.theta, obs, "obs_embed.", 2)

    def embed_action(self, a):
        return mlp(self.theta, a, "act_embed.", 1)

    def embed_z(self, z):
        return mlp(self.theta, z, "z_embed.", 1)

    def transition(self, h, xa):
        return _gaussian_head(self.theta, "transition.", torch.cat([h, xa], -1))

    def proposal(self, h, xa, xo):
        if self.enc.proposal_is_prior:
            return self.transition(h, xa)
        return _gaussian_head(self.phi, "proposal.", torch.cat([h, xa, xo], -1))

    def decoder(self, h, z, xz, xa):
        return _gaussian_head(self.theta, "decoder.", torch.cat([h, xz, xa], -1))

    def rnn(self, h, xz, xo, xa):
        return gru_step(self.theta, h, torch.cat([xz, xo, xa], -1), prefix="rnn.")

    def summarize(self, h, xz, logw):
        return summarize_particles(self.theta, h, xz, logw)


def summarize_particles(theta: Params, h: torch.Tensor, xz: torch.Tensor, logw: torch.Tensor) -> torch.Tensor:
    """GRU scan over particles in index order from a zero state.

    Each input is ``[normalized weight, phi_z(z), h]``; the result depends on
    particle order.
    """
    w = torch.softmax(logw, -1).unsqueeze(-1)
    proj = gru_input_projection(theta, torch.cat([w, xz, h], -1), prefix="summary.")
    hidden = theta["summary.w_h"].shape[-1]
    state = torch.zeros(h.shape[0], hidden, dtype=DTYPE)
    for k in range(h.shape[1]):
        state = gru_step(theta, state, None, prefix="summary.", x_proj=proj[:, k])
    return state


class DvrlEncoder:
    """Particle-belief encoder; architecture sizes only, parameters passed in."""

    kind = "dvrl"

    def __init__(self, obs_dim: int, action_in_dim: int, num_particles: int = 30,
                 h_dim: int = 128, z_dim: int = 128, obs_embed: int = 64, action_embed: int = 64,
                 proposal_is_prior: bool = False):
        if num_particles < 1:
            raise ContractError("num_particles must be >= 1")
        self.obs_dim = obs_dim
        self.action_in_dim = action_in_dim
        self.num_particles = num_particles
        self.h_dim = h_dim
        self.z_dim = z_dim
        self.obs_embed = obs_embed
        self.action_embed = action_embed
        self.proposal_is_prior = proposal_is_prior

    @property
    def feature_dim(self) -> int:
        return self.h_dim

    def init_params(self, rng: np.random.Generator) -> Dict[str, Params]:
        dh, dz, eo, ea = self.h_dim, self.z_dim, self.obs_embed, self.action_embed
        theta: Params = {}
        init_mlp(theta, "obs_embed.", [self.obs_dim, eo, eo], rng)
        init_mlp(theta, "act_embed.", [self.action_in_dim, ea], rng)
        init_mlp(theta, "z_embed.", [dz, dh], rng)
        _init_gaussian_head(theta, "transition.", dh + ea, dh, dz, rng)
        _init_gaussian_head(theta, "decoder.", dh + dh + ea, dh, self.obs_dim, rng)
        init_gru(theta, "rnn.", dh + eo + ea, dh, rng)
        init_gru(theta, "summary.", 1 + dh + dh, dh, rng)
        theta["init.h_raw"] = torch.zeros(dh, dtype=DTYPE)
        theta["init.z"] = torch.zeros(dz, dtype=DTYPE)
        phi: Params = {}
        _init_gaussian_head(phi, "proposal.", dh + ea + eo, dh, dz, rng)
        return {"theta": theta, "phi": phi}

    def model(self, params) -> NeuralDvrlModel:
        return NeuralDvrlModel(self, params)

    def init_belief(self, params, batch: int = 1, K: Optional[int] = None) -> ParticleBelief:
        K = self.num_particles if K is None else K
        if K < 1:
            raise ContractError("K must be >= 1")
        theta = params["theta"]
        h = torch.tanh(theta["init.h_raw"]).expand(batch, K, self.h_dim)
        z = theta["init.z"].expand(batch, K, self.z_dim)
        logw = torch.full((batch, K), -math.log(K), dtype=DTYPE)
        xz = mlp(theta, z, "z_embed.", 1)
        return ParticleBelief(h, z, logw, summarize_particles(theta, h, xz, logw))

    def initial_state(self, params, batch: int) -> ParticleBelief:
        return self.init_belief(params, batch)

    def features(self, belief: ParticleBelief) -> torch.Tensor:
        return belief.summary

    def step(self, params, belief: ParticleBelief, a_prev, obs, generator=None,
             ancestors=None, noise=None):
        if obs.shape[-1] != self.obs_dim or a_prev.shape[-1] != self.action_in_dim:
            raise ShapeError("dvrl_encoder_step: observation or action dim mismatch")
        return dvrl_encoder_step(belief, a_prev, obs, self.model(params), generator, ancestors, noise)

    def reset_where(self, params, belief: ParticleBelief, mask: np.ndarray) -> ParticleBelief:
        if not mask.any():
            return belief
        return belief.where(mask, self.init_belief(params, belief.logw.shape[0]))

    def detach(self, belief: ParticleBelief) -> ParticleBelief:
        return belief.detach()
