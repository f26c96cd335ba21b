"""Differentiable numerical core.

Values are float64 ``torch.Tensor`` objects; reverse-mode gradients come from
torch autograd. Everything built on top (distributions, GRU cells, MLPs,
optimizer) is written here as plain functions over tensors and parameter
dictionaries so that parameter groups can be cloned per rollout segment.

GRU convention used throughout::

    u  = sigmoid(W_u x + U_u h + b_u)          # update gate
    r  = sigmoid(W_r x + U_r h + b_r)          # reset gate
    h~ = tanh(W_c x + U_c (r * h) + b_c)       # candidate
    h' = u * h + (1 - u) * h~

so ``u`` multiplies the *old* state.
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DomainError, ShapeError

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)
STD_FLOOR = 1e-6
RMSPROP_EPS = 1e-5

Params = Dict[str, torch.Tensor]


def as_value(x, requires_grad: bool = False) -> torch.Tensor:
    """Convert array-likes to a float64 tensor (tensors pass through unchanged)."""
    if isinstance(x, torch.Tensor):
        if x.dtype != DTYPE:
            x = x.to(DTYPE)
        return x
    t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
    if requires_grad:
        t.requires_grad_(True)
    return t


def _check_same_shape(*tensors: torch.Tensor, what: str = "operands") -> None:
    shape = tensors[0].shape[-1:]
    for t in tensors[1:]:
        if t.shape[-1:] != shape:
            raise ShapeError(
                f"dimension mismatch between {what}: "
                + ", ".join(str(tuple(t.shape)) for t in tensors)
            )


# --------------------------------------------------------------------------
# Distributions
# --------------------------------------------------------------------------


class DiagonalGaussian(NamedTuple):
    """Diagonal Gaussian over the last axis; ``std`` must be strictly positive."""

    mean: torch.Tensor
    std: torch.Tensor


def gaussian_logpdf(x, dist: DiagonalGaussian) -> torch.Tensor:
    """Log-density summed over the last axis (leading axes are batch)."""
    x = as_value(x)
    mean, std = as_value(dist.mean), as_value(dist.std)
    _check_same_shape(x, mean, std, what="x, mean and std")
    if bool((std <= 0).any()):
        raise DomainError("standard deviation must be strictly positive")
    z = (x - mean) / std
    return (-0.5 * LOG_2PI - torch.log(std) - 0.5 * z * z).sum(-1)


def reparam_sample(dist: DiagonalGaussian, noise) -> torch.Tensor:
    """``mean + std * noise``; ``noise`` is external standard-normal input."""
    noise = as_value(noise).detach()
    _check_same_shape(noise, dist.mean, dist.std, what="noise and distribution")
    return dist.mean + dist.std * noise


def gaussian_entropy(dist: DiagonalGaussian) -> torch.Tensor:
    return (0.5 * (1.0 + LOG_2PI) + torch.log(dist.std)).sum(-1)


class Categorical:
    """Categorical distribution over the last axis of ``logits``."""

    def __init__(self, logits):
        self.logits = as_value(logits)
        if not bool(torch.isfinite(self.logits).all()):
            raise DomainError("logits must be finite")
        # max-subtracted log-softmax
        shifted = self.logits - self.logits.max(-1, keepdim=True).values.detach()
        self.log_probs = shifted - torch.logsumexp(shifted, -1, keepdim=True)

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    def log_prob(self, action) -> torch.Tensor:
        idx = torch.as_tensor(action, dtype=torch.long)
        if idx.dim() == 0:
            return self.log_probs[..., idx]
        return self.log_probs.gather(-1, idx.unsqueeze(-1)).squeeze(-1)

    def entropy(self) -> torch.Tensor:
        p = self.probs
        return -(p * self.log_probs).sum(-1)

    def sample(self, generator: torch.Generator) -> torch.Tensor:
        """Inverse-CDF sampling; one uniform draw per batch row."""
        p = self.probs.detach()
        cdf = torch.cumsum(p, -1)
        u = torch.rand(p.shape[:-1] + (1,), generator=generator, dtype=DTYPE)
        idx = torch.searchsorted(cdf, u * cdf[..., -1:], right=True).squeeze(-1)
        return idx.clamp_(max=p.shape[-1] - 1)

    def mode(self) -> torch.Tensor:
        return self.logits.argmax(-1)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None):
    """Affine map ``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(
            f"linear layer expects input dim {weight.shape[-1]}, got {x.shape[-1]}"
        )
    out = x @ weight.transpose(-1, -2)
    if bias is not None:
        out = out + bias
    return out


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, min=0.0)


def softplus(x: torch.Tensor) -> torch.Tensor:
    # log1p(exp(-|x|)) + max(x, 0), stable for large |x|
    return F.softplus(as_value(x))


def positive_std(raw: torch.Tensor) -> torch.Tensor:
    return softplus(raw) + STD_FLOOR


def gru_step(params: Mapping[str, torch.Tensor], h: torch.Tensor, x: Optional[torch.Tensor],
             prefix: str = "", x_proj: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One GRU step. Expects ``{prefix}w_x`` (3H, D), ``{prefix}w_h`` (3H, H), ``{prefix}b`` (3H,).

    ``x_proj`` may carry a precomputed ``x @ w_x.T + b`` (used by scans that
    project all inputs at once); ``x`` is then ignored.
    """
    w_x = params[prefix + "w_x"]
    w_h = params[prefix + "w_h"]
    hidden = w_h.shape[-1]
    if x_proj is None:
        if h.shape[-1] != hidden or x.shape[-1] != w_x.shape[-1]:
            raise ShapeError(
                f"gru_step: expected h dim {hidden} and x dim {w_x.shape[-1]}, "
                f"got {h.shape[-1]} and {x.shape[-1]}"
            )
        x_proj = linear(x, w_x, params[prefix + "b"])
    elif h.shape[-1] != hidden:
        raise ShapeError(f"gru_step: expected h dim {hidden}, got {h.shape[-1]}")
    gates = torch.sigmoid(x_proj[..., :2 * hidden] + linear(h, w_h[:2 * hidden]))
    u, r = gates[..., :hidden], gates[..., hidden:]
    cand = torch.tanh(x_proj[..., 2 * hidden:] + linear(r * h, w_h[2 * hidden:]))
    return u * h + (1.0 - u) * cand


def gru_input_projection(params: Mapping[str, torch.Tensor], x: torch.Tensor, prefix: str = ""):
    w_x = params[prefix + "w_x"]
    if x.shape[-1] != w_x.shape[-1]:
        raise ShapeError(f"GRU input dim {x.shape[-1]} does not match {w_x.shape[-1]}")
    return linear(x, w_x, params[prefix + "b"])


def mlp(params: Mapping[str, torch.Tensor], x: torch.Tensor, prefix: str, n_layers: int,
        final_relu: bool = True) -> torch.Tensor:
    """Stack of ``n_layers`` affine layers ``{prefix}{i}.w/.b`` with ReLU between them."""
    for i in range(n_layers):
        x = linear(x, params[f"{prefix}{i}.w"], params[f"{prefix}{i}.b"])
        if i < n_layers - 1 or final_relu:
            x = relu(x)
    return x


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------


def orthogonal_init(rows: int, cols: int, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """Random (semi-)orthogonal matrix via QR of a Gaussian matrix."""
    if rows < 1 or cols < 1:
        raise ContractError("orthogonal_init needs rows, cols >= 1")
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    # sign fix makes the distribution uniform (Haar)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q


def init_linear(params: Params, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    params[name + ".w"] = as_value(orthogonal_init(n_out, n_in, rng))
    params[name + ".b"] = torch.zeros(n_out, dtype=DTYPE)


def init_mlp(params: Params, prefix: str, sizes: Sequence[int], rng: np.random.Generator) -> None:
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(params, f"{prefix}{i}", n_in, n_out, rng)


def init_gru(params: Params, prefix: str, n_in: int, hidden: int, rng: np.random.Generator) -> None:
    params[prefix + "w_x"] = as_value(
        np.concatenate([orthogonal_init(hidden, n_in, rng) for _ in range(3)])
    )
    params[prefix + "w_h"] = as_value(
        np.concatenate([orthogonal_init(hidden, hidden, rng) for _ in range(3)])
    )
    params[prefix + "b"] = torch.zeros(3 * hidden, dtype=DTYPE)


def make_leaves(params: Params) -> Params:
    """Detach every entry and mark it as a gradient leaf."""
    return {k: v.detach().clone(memory_format=torch.contiguous_format).requires_grad_(True) for k, v in params.items()}


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


def clip_grad_norm(grads: Sequence[torch.Tensor], max_norm: float):
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``.

    Returns the clipped gradients and the norm before clipping.
    """
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return list(grads), total


def rmsprop_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
                 state: Dict[str, torch.Tensor], lr: float, alpha: float = 0.99,
                 eps: float = RMSPROP_EPS, max_grad_norm: Optional[float] = 0.5) -> float:
    """In-place RMSProp update with global-norm clipping applied first.

    ``state`` holds the squared-gradient accumulators and is updated in place.
    Parameters without a gradient entry are left untouched. Returns the
    pre-clipping global gradient norm.
    """
    names = [k for k in params if grads.get(k) is not None]
    clipped, norm = clip_grad_norm([grads[k] for k in names], max_grad_norm)
    with torch.no_grad():
        for k, g in zip(names, clipped):
            s = state.get(k)
            if s is None:
                s = torch.zeros_like(params[k])
            s = alpha * s + (1.0 - alpha) * g * g
            state[k] = s
            params[k].sub_(lr * g / (torch.sqrt(s) + eps))
    return norm


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


FD_RESOLUTION_FACTOR = 1e5


def grad_check(f: Callable[..., torch.Tensor], params: Iterable[torch.Tensor], eps: float = 1e-6,
               floor: Optional[float] = None) -> float:
    """Max relative error between autograd and central finite differences.

    ``f`` is called with no arguments and must close over ``params`` (leaf
    tensors that require grad). Per coordinate the error is
    ``|g - g_fd| / max(|g|, |g_fd|, floor)``.

    A difference quotient cannot resolve slopes much below
    ``u * |f| / eps`` (``u`` the float64 unit roundoff), so by default the
    floor is ``max(1e-8, 1e5 * u * max(|f|, 1) / eps)`` (roundoff then costs at
    most ~1e-5 of relative error); coordinates under
    it are effectively held to an absolute tolerance. Pass ``floor=1e-8`` for
    the plain relative error.
    """
    params = list(params)
    out = f()
    if out.numel() != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    if floor is None:
        u = float(np.finfo(np.float64).eps) / 2
        floor = max(1e-8, FD_RESOLUTION_FACTOR * u * max(abs(out.item()), 1.0) / eps)
    grads = torch.autograd.grad(out, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            if not p.is_contiguous():
                raise ContractError("grad_check needs contiguous parameter tensors")
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * eps)
                ga = g.reshape(-1)[i].item()
                worst = max(worst, abs(ga - fd) / max(abs(ga), abs(fd), floor))
    return worst
