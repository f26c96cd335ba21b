"""Self-contained oracle and property suites.

Every suite uses fixed internal seeds, needs no config and touches no
files, so ``beliefrl verify`` is reproducible on any machine. The
acceptance tests call the same functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch
from scipy import stats

from .diffmath import (
    DTYPE,
    Categorical,
    DiagonalGaussian,
    gaussian_entropy,
    gaussian_logpdf,
    grad_check,
    gru_step,
    init_gru,
    init_mlp,
    linear,
    make_leaves,
    mlp,
    positive_std,
    relu,
    reparam_sample,
    softplus,
)
from .encoders import DvrlEncoder, DvrlModel, ParticleBelief, summarize_particles
from .envs import DiscreteHMM, LinearGaussianSSM
from .inference import (
    elbo_term,
    exact_belief_update,
    hmm_bootstrap,
    kalman_log_marginal,
    lgss_bootstrap,
    particle_belief_to_histogram,
    resample_ancestors,
    simulate_hmm,
    simulate_lgss,
)
from .rl import compute_targets


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    data: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def kalman_model() -> LinearGaussianSSM:
    return LinearGaussianSSM(A=0.9, C=1.0, Q=0.3, R=0.5, horizon=25)


# --------------------------------------------------------------------------
# SMC bound against the Kalman filter
# --------------------------------------------------------------------------


def kalman_bound(seeds: int = 50, Ks: Sequence[int] = (1, 10, 100, 1000), T: int = 25,
                 rel_tol: float = 0.02) -> CheckResult:
    """SMC ELBO is a lower bound (within 3 SE) and is tight at the largest K."""
    model = kalman_model()
    exact, elbos = [], {K: [] for K in Ks}
    for s in range(seeds):
        _, obs = simulate_lgss(model, T, np.random.default_rng([s, 1]))
        exact.append(kalman_log_marginal(model, obs))
        for K in Ks:
            elbos[K].append(lgss_bootstrap(model, obs, K=K, rng=np.random.default_rng([s, 2, K])).elbo)
    exact = np.asarray(exact)
    ok, parts = True, []
    for K in Ks:
        e = np.asarray(elbos[K])
        se = e.std(ddof=1) / math.sqrt(seeds)
        bound_ok = e.mean() <= exact.mean() + 3 * se
        ok &= bound_ok
        parts.append(f"K={K} mean={e.mean():.4f} se={se:.4f}{'' if bound_ok else ' (above bound)'}")
    top = np.asarray(elbos[max(Ks)]).mean()
    rel = abs(top - exact.mean()) / abs(exact.mean())
    ok &= rel < rel_tol
    detail = f"exact={exact.mean():.4f}; " + "; ".join(parts) + f"; rel gap at K={max(Ks)} = {rel:.4%}"
    return CheckResult("kalman_bound", bool(ok), detail,
                       {"exact": exact, "elbos": {K: np.asarray(v) for K, v in elbos.items()}, "rel": rel})


def monotone_tightening(seeds: int = 50, Ks: Sequence[int] = (1, 4, 100), T: int = 25) -> CheckResult:
    """Mean ELBO over shared observation sequences grows with K."""
    model = kalman_model()
    means = {}
    obs_list = [simulate_lgss(model, T, np.random.default_rng([s, 3]))[1] for s in range(seeds)]
    for K in Ks:
        means[K] = float(np.mean([lgss_bootstrap(model, o, K=K, rng=np.random.default_rng([s, 4, K])).elbo
                                  for s, o in enumerate(obs_list)]))
    ordered = sorted(Ks)
    ok = all(means[a] <= means[b] for a, b in zip(ordered, ordered[1:]))
    detail = " <= ".join(f"ELBO(K={K})={means[K]:.4f}" for K in ordered)
    return CheckResult("monotone_tightening", ok, detail, {"means": means})


# --------------------------------------------------------------------------
# Discrete belief
# --------------------------------------------------------------------------


def random_hmm(rng: np.random.Generator, n_states: int = 3, n_obs: int = 3) -> DiscreteHMM:
    trans = rng.dirichlet(np.ones(n_states), size=n_states)
    emis = rng.dirichlet(np.ones(n_obs), size=n_states)
    return DiscreteHMM(trans, emis, rng.dirichlet(np.ones(n_states)))


def hmm_belief_tv(seeds: int = 10, K: int = 10_000, T: int = 20, tol: float = 0.05) -> CheckResult:
    """Bootstrap-filter histogram vs the exact Bayes filter, every step."""
    worst = 0.0
    for s in range(seeds):
        model = random_hmm(np.random.default_rng([s, 5]))
        _, obs = simulate_hmm(model, T, np.random.default_rng([s, 6]))
        res = hmm_bootstrap(model, obs, K=K, rng=np.random.default_rng([s, 7]))
        b = model.initial
        for t in range(T):
            b, _ = exact_belief_update(model, b, 0, int(obs[t]))
            hist = particle_belief_to_histogram(res.particles[t], res.logw[t], model.n_states)
            worst = max(worst, 0.5 * float(np.abs(hist - b).sum()))
    return CheckResult("hmm_belief_tv", worst < tol, f"max TV over {seeds} seeds x {T} steps = {worst:.4f}",
                       {"max_tv": worst})


# --------------------------------------------------------------------------
# ELBO bookkeeping
# --------------------------------------------------------------------------


def tiny_dvrl(seed: int, obs_dim: int = 2, action_dim: int = 2, K: int = 4, d: int = 3, embed: int = 3):
    enc = DvrlEncoder(obs_dim, action_dim, num_particles=K, h_dim=d, z_dim=d, obs_embed=embed,
                      action_embed=embed)
    rng = np.random.default_rng([seed, 8])
    params = {g: make_leaves(p) for g, p in enc.init_params(rng).items()}
    with torch.no_grad():
        params["theta"]["init.h_raw"].copy_(torch.as_tensor(rng.normal(size=d)))
        params["theta"]["init.z"].copy_(torch.as_tensor(rng.normal(size=d)))
        # nonzero biases keep ReLU pre-activations off the kink at 0
        for group in params.values():
            for k, v in group.items():
                if k.endswith(".b"):
                    v.copy_(torch.as_tensor(rng.normal(scale=0.5, size=v.shape)))
    return enc, params


def elbo_additivity(T: int = 20, n_s: int = 5, batch: int = 3, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """Summing per-segment ELBOs (latent carried and detached) equals one pass."""
    enc, params = tiny_dvrl(seed, K=6, d=8, embed=8)
    rng = np.random.default_rng([seed, 9])
    obs = torch.as_tensor(rng.normal(size=(T, batch, 2)))
    acts = torch.as_tensor(rng.normal(size=(T, batch, 2)))
    with torch.no_grad():
        gen = torch.Generator().manual_seed(seed)
        belief = enc.init_belief(params, batch)
        whole = torch.zeros(batch, dtype=DTYPE)
        for t in range(T):
            belief, term = enc.step(params, belief, acts[t], obs[t], gen)
            whole = whole + term

    gen = torch.Generator().manual_seed(seed)
    belief = enc.init_belief(params, batch)
    seg_sums = []
    for start in range(0, T, n_s):
        acc = torch.zeros(batch, dtype=DTYPE)
        for t in range(start, min(start + n_s, T)):
            belief, term = enc.step(params, belief, acts[t], obs[t], gen)
            acc = acc + term
        seg_sums.append(acc.detach())
        belief = belief.detach()
    segmented = torch.stack(seg_sums).sum(0)
    err = float((segmented - whole).abs().max())
    return CheckResult("elbo_additivity", err <= tol, f"max |sum of segments - single pass| = {err:.3e}",
                       {"err": err})


class LgssDvrlModel(DvrlModel):
    """A linear-Gaussian model in the DVRL interface, with a bootstrap proposal.

    Each particle's ``h`` is the previous state and ``z`` the new one, so the
    encoder step is exactly a bootstrap particle filter. Needs diagonal
    ``Q`` and ``R``.
    """

    def __init__(self, model: LinearGaussianSSM):
        for name in ("Q", "R"):
            m = getattr(model, name)
            if not np.allclose(m, np.diag(np.diag(m))):
                raise ValueError(f"{name} must be diagonal")
        self.m = model
        self.A = torch.as_tensor(model.A, dtype=DTYPE)
        self.B = torch.as_tensor(model.B, dtype=DTYPE)
        self.C = torch.as_tensor(model.C, dtype=DTYPE)
        self.q_std = torch.as_tensor(np.sqrt(np.diag(model.Q)), dtype=DTYPE)
        self.r_std = torch.as_tensor(np.sqrt(np.diag(model.R)), dtype=DTYPE)

    def embed_obs(self, obs):
        return obs

    def embed_action(self, a):
        return a

    def embed_z(self, z):
        return z

    def transition(self, h, xa):
        mean = h @ self.A.T + xa @ self.B.T
        return DiagonalGaussian(mean, self.q_std.expand_as(mean))

    def proposal(self, h, xa, xo):
        return self.transition(h, xa)

    def decoder(self, h, z, xz, xa):
        mean = z @ self.C.T
        return DiagonalGaussian(mean, self.r_std.expand_as(mean))

    def rnn(self, h, xz, xo, xa):
        return xz

    def summarize(self, h, xz, logw):
        return torch.zeros(h.shape[0], h.shape[-1], dtype=DTYPE)

    def init_belief(self, K: int, generator: torch.Generator, batch: int = 1) -> ParticleBelief:
        n = self.m.state_dim
        chol = torch.as_tensor(np.linalg.cholesky(self.m.prior_cov), dtype=DTYPE)
        eps = torch.randn(batch, K, n, generator=generator, dtype=DTYPE)
        h = torch.as_tensor(self.m.prior_mean, dtype=DTYPE) + eps @ chol.T
        logw = torch.full((batch, K), -math.log(K), dtype=DTYPE)
        return ParticleBelief(h, h.clone(), logw, torch.zeros(batch, n, dtype=DTYPE))


def dvrl_kalman(seeds: int = 20, K: int = 1000, T: int = 25, rel_tol: float = 0.02) -> CheckResult:
    """The DVRL particle update with an exact LGSS model recovers the Kalman log-marginal."""
    from .encoders import dvrl_encoder_step

    model = kalman_model()
    wrapped = LgssDvrlModel(model)
    exact, elbos = [], []
    a = torch.zeros(1, model.action_dim, dtype=DTYPE)
    for s in range(seeds):
        _, obs = simulate_lgss(model, T, np.random.default_rng([s, 16]))
        exact.append(kalman_log_marginal(model, obs))
        gen = torch.Generator().manual_seed(s)
        belief = wrapped.init_belief(K, gen)
        total = 0.0
        for t in range(T):
            belief, term = dvrl_encoder_step(belief, a, torch.as_tensor(obs[t:t + 1], dtype=DTYPE), wrapped, gen)
            total += float(term)
        elbos.append(total)
    rel = abs(np.mean(elbos) - np.mean(exact)) / abs(np.mean(exact))
    return CheckResult("dvrl_kalman", rel < rel_tol,
                       f"mean ELBO {np.mean(elbos):.4f} vs exact {np.mean(exact):.4f} (rel gap {rel:.4%}, K={K})",
                       {"rel": rel})


def _random_lgss(rng: np.random.Generator) -> LinearGaussianSSM:
    n = int(rng.integers(1, 4))
    m = int(rng.integers(1, 3))
    A = rng.normal(size=(n, n)) * 0.5
    L = rng.normal(size=(n, n)) * 0.5
    M = rng.normal(size=(m, m)) * 0.5
    return LinearGaussianSSM(A=A, C=rng.normal(size=(m, n)), Q=L @ L.T + 0.1 * np.eye(n),
                             R=M @ M.T + 0.2 * np.eye(m))


def iwae_smc_k1(models: int = 20, T: int = 15, tol: float = 1e-12) -> CheckResult:
    """At K=1 resampling is a no-op, so the IWAE and SMC bounds coincide."""
    worst = 0.0
    for s in range(models):
        model = _random_lgss(np.random.default_rng([s, 10]))
        _, obs = simulate_lgss(model, T, np.random.default_rng([s, 11]))
        smc = lgss_bootstrap(model, obs, K=1, rng=np.random.default_rng([s, 12]), resample=True).elbo
        iwae = lgss_bootstrap(model, obs, K=1, rng=np.random.default_rng([s, 12]), resample=False).elbo
        worst = max(worst, abs(smc - iwae))
    return CheckResult("iwae_smc_k1", worst <= tol, f"max |SMC - IWAE| over {models} models = {worst:.3e}",
                       {"err": worst})


# --------------------------------------------------------------------------
# Gradient checks
# --------------------------------------------------------------------------


def _leaf(rng, *shape, scale=1.0, offset=0.0):
    return torch.as_tensor(rng.normal(size=shape) * scale + offset, dtype=DTYPE).requires_grad_(True)


def _weights(rng, *shape):
    return torch.as_tensor(rng.normal(size=shape), dtype=DTYPE)


def _gc_gaussian_logpdf(rng):
    x, m, r = _leaf(rng, 3, 4), _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    return (lambda: gaussian_logpdf(x, DiagonalGaussian(m, positive_std(r))).sum()), [x, m, r]


def _gc_reparam(rng):
    m, r = _leaf(rng, 5), _leaf(rng, 5)
    noise, w = _weights(rng, 5), _weights(rng, 5)
    return (lambda: (reparam_sample(DiagonalGaussian(m, positive_std(r)), noise) * w).sum()), [m, r]


def _gc_entropy(rng):
    r = _leaf(rng, 2, 4)
    return (lambda: gaussian_entropy(DiagonalGaussian(torch.zeros(2, 4, dtype=DTYPE), positive_std(r))).sum()), [r]


def _gc_categorical(rng):
    logits = _leaf(rng, 4, 5)
    a = torch.as_tensor(rng.integers(0, 5, size=4))
    return (lambda: (Categorical(logits).log_prob(a) + 0.3 * Categorical(logits).entropy()).sum()), [logits]


def _gc_linear(rng):
    x, w, b = _leaf(rng, 3, 4), _leaf(rng, 2, 4), _leaf(rng, 2)
    return (lambda: (linear(x, w, b) ** 2).sum()), [x, w, b]


def _gc_relu(rng):
    # keep inputs away from the kink
    sign = torch.as_tensor(rng.choice([-1.0, 1.0], size=6), dtype=DTYPE)
    x = torch.as_tensor(rng.uniform(0.1, 2.0, size=6), dtype=DTYPE).mul(sign).requires_grad_(True)
    w = _weights(rng, 6)
    return (lambda: (relu(x) * w).sum()), [x]


def _gc_softplus(rng):
    x, w = _leaf(rng, 6, scale=3.0), _weights(rng, 6)
    return (lambda: (softplus(x) * w).sum()), [x]


def _gc_gru(rng):
    p = {}
    init_gru(p, "g.", 3, 4, rng)
    p = make_leaves(p)
    h, x, w = _leaf(rng, 2, 4), _leaf(rng, 2, 3), _weights(rng, 2, 4)
    return (lambda: (gru_step(p, h, x, prefix="g.") * w).sum()), [h, x, *p.values()]


def _gc_mlp(rng):
    p = {}
    init_mlp(p, "m.", [3, 4, 2], rng)
    p = make_leaves(p)
    for v in p.values():
        with torch.no_grad():
            v.add_(torch.as_tensor(rng.normal(size=v.shape) * 0.1))
    x, w = _leaf(rng, 2, 3), _weights(rng, 2, 2)
    return (lambda: (mlp(p, x, "m.", 2, final_relu=False) * w).sum()), [x, *p.values()]


def _gc_elbo_term(rng):
    logw = _leaf(rng, 3, 6, scale=2.0)
    return (lambda: elbo_term(logw).sum()), [logw]


def _gc_summary(rng):
    enc, params = tiny_dvrl(int(rng.integers(1 << 30)), K=3)
    theta = params["theta"]
    h, xz, logw = _leaf(rng, 2, 3, 3), _leaf(rng, 2, 3, 3), _leaf(rng, 2, 3)
    w = _weights(rng, 2, 3)
    keys = [k for k in theta if k.startswith("summary.")]
    return (lambda: (summarize_particles(theta, h, xz, logw) * w).sum()), [h, xz, logw] + [theta[k] for k in keys]


def _gc_dvrl_step(rng, K: int = 2, d: int = 4):
    enc, params = tiny_dvrl(int(rng.integers(1 << 30)), K=K, d=d, embed=d)
    B = 1
    obs, act = _weights(rng, B, 2), _weights(rng, B, 2)
    with torch.no_grad():
        belief = enc.init_belief(params, B)
        belief, _ = enc.step(params, belief, act, obs, torch.Generator().manual_seed(1))
    belief = belief.detach()
    anc = torch.as_tensor(rng.integers(0, K, size=(B, K)))
    noise = _weights(rng, B, K, d)
    obs2, act2 = _weights(rng, B, 2), _weights(rng, B, 2)
    leaves = list(params["theta"].values()) + list(params["phi"].values())

    def f():
        _, term = enc.step(params, belief, act2, obs2, ancestors=anc, noise=noise)
        return term.sum()
    return f, leaves


GRAD_CASES: Dict[str, Callable] = {
    "gaussian_logpdf": _gc_gaussian_logpdf,
    "reparam_sample": _gc_reparam,
    "gaussian_entropy": _gc_entropy,
    "categorical": _gc_categorical,
    "linear": _gc_linear,
    "relu": _gc_relu,
    "softplus": _gc_softplus,
    "gru_step": _gc_gru,
    "mlp": _gc_mlp,
    "elbo_term": _gc_elbo_term,
    "summarize_particles": _gc_summary,
    "dvrl_elbo_step": _gc_dvrl_step,
}


def gradient_suite(seeds: int = 20, tol: float = 1e-4, cases: Sequence[str] = tuple(GRAD_CASES)) -> CheckResult:
    worst = {}
    for name in cases:
        w = 0.0
        for s in range(seeds):
            f, params = GRAD_CASES[name](np.random.default_rng([s, 13]))
            w = max(w, grad_check(f, params))
        worst[name] = w
    ok = all(v < tol for v in worst.values())
    bad = [k for k, v in worst.items() if v >= tol]
    detail = f"{len(worst)} ops x {seeds} seeds, max rel err {max(worst.values()):.2e}"
    if bad:
        detail += f"; failing: {', '.join(bad)}"
    return CheckResult("gradient_suite", ok, detail, {"worst": worst})


# --------------------------------------------------------------------------
# Resampling and targets
# --------------------------------------------------------------------------


def resampling_chi_square(vectors: int = 10, draws: int = 100_000, K: int = 8, alpha: float = 0.01,
                          min_pass: int = 9) -> CheckResult:
    """Ancestor counts follow the normalized weights."""
    passes, pvals = 0, []
    for v in range(vectors):
        rng = np.random.default_rng([v, 14])
        w = rng.dirichlet(np.ones(K))
        logw = np.tile(np.log(w), (draws // K, 1))
        idx = resample_ancestors(torch.as_tensor(logw), torch.Generator().manual_seed(v)).numpy()
        counts = np.bincount(idx.reshape(-1), minlength=K)
        p = float(stats.chisquare(counts, counts.sum() * w).pvalue)
        pvals.append(p)
        passes += p > alpha
    return CheckResult("resampling_chi_square", passes >= min_pass,
                       f"{passes}/{vectors} weight vectors pass at alpha={alpha}", {"pvalues": pvals})


def brute_force_targets(rewards, dones, bootstrap, gamma):
    """Exact rational enumeration of the n-step returns."""
    n, e = len(rewards), len(rewards[0])
    g = Fraction(gamma)
    out = [[None] * e for _ in range(n)]
    for j in range(n):
        for k in range(e):
            total, disc, ended = Fraction(0), Fraction(1), False
            for i in range(j, n):
                total += disc * Fraction(rewards[i][k])
                disc *= g
                if dones[i][k]:
                    ended = True
                    break
            if not ended:
                total += disc * Fraction(bootstrap[k])
            out[j][k] = total
    return out


def targets_oracle(instances: int = 1000, seed: int = 0) -> CheckResult:
    """compute_targets against exact enumeration.

    Rewards, values and discounts are short dyadic rationals, so every float
    operation in the recursion is exact and the comparison can be equality.
    """
    rng = np.random.default_rng([seed, 15])
    gammas = [0.0, 0.5, 0.75, 0.875, 0.9375, 1.0]
    mismatches = 0
    for _ in range(instances):
        n, e = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        rewards = rng.integers(-16, 17, size=(n, e)) / 4.0
        dones = rng.random((n, e)) < 0.25
        boot = rng.integers(-64, 65, size=e) / 8.0
        gamma = gammas[int(rng.integers(len(gammas)))]
        got = compute_targets(rewards, dones, boot, gamma)
        want = brute_force_targets(rewards.tolist(), dones.tolist(), boot.tolist(), gamma)
        mismatches += any(Fraction(float(got[j, k])) != want[j][k] for j in range(n) for k in range(e))
    return CheckResult("targets_oracle", mismatches == 0, f"{instances - mismatches}/{instances} instances exact",
                       {"mismatches": mismatches})


SUITES: Dict[str, Callable[[], CheckResult]] = {
    "kalman_bound": kalman_bound,
    "monotone_tightening": monotone_tightening,
    "hmm_belief_tv": hmm_belief_tv,
    "elbo_additivity": elbo_additivity,
    "iwae_smc_k1": iwae_smc_k1,
    "dvrl_kalman": dvrl_kalman,
    "gradient_suite": gradient_suite,
    "resampling_chi_square": resampling_chi_square,
    "targets_oracle": targets_oracle,
}


def run_all(names: Sequence[str] = tuple(SUITES), report: Callable[[str], None] = print) -> List[CheckResult]:
    results = []
    for name in names:
        res = SUITES[name]()
        report(res.line())
        results.append(res)
    return results
