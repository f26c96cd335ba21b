import math

import numpy as np
import pytest
import torch

from beliefrl.diffmath import (
    DTYPE,
    Categorical,
    DiagonalGaussian,
    clip_grad_norm,
    gaussian_entropy,
    gaussian_logpdf,
    grad_check,
    gru_step,
    init_gru,
    init_mlp,
    linear,
    make_leaves,
    mlp,
    orthogonal_init,
    positive_std,
    relu,
    reparam_sample,
    rmsprop_step,
    softplus,
)
from beliefrl.errors import ContractError, DomainError, ShapeError


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def leaf(x):
    return t(x).requires_grad_(True)


# -- gaussian_logpdf --------------------------------------------------------


@pytest.mark.parametrize("x, mu, sigma, want", [
    ([0.0], [0.0], [1.0], -0.918939),
    ([1.0], [0.0], [1.0], -1.418939),
    ([0.0, 0.0], [0.0, 0.0], [1.0, 1.0], -1.837877),
])
def test_gaussian_logpdf_examples(x, mu, sigma, want):
    assert float(gaussian_logpdf(t(x), DiagonalGaussian(t(mu), t(sigma)))) == pytest.approx(want, abs=1e-6)


def test_gaussian_logpdf_errors():
    with pytest.raises(ShapeError):
        gaussian_logpdf(t([0.0, 1.0]), DiagonalGaussian(t([0.0]), t([1.0])))
    with pytest.raises(DomainError):
        gaussian_logpdf(t([0.0]), DiagonalGaussian(t([0.0]), t([0.0])))
    with pytest.raises(DomainError):
        gaussian_logpdf(t([0.0]), DiagonalGaussian(t([0.0]), t([-1.0])))


def test_gaussian_logpdf_finite_at_std_floor():
    out = gaussian_logpdf(t([3.0]), DiagonalGaussian(t([0.0]), t([1e-6])))
    assert math.isfinite(float(out))


def test_gaussian_logpdf_batched_rows_independent():
    x = t(np.random.default_rng(0).normal(size=(5, 3)))
    d = DiagonalGaussian(torch.zeros(5, 3, dtype=DTYPE), torch.ones(5, 3, dtype=DTYPE))
    batched = gaussian_logpdf(x, d)
    rows = [float(gaussian_logpdf(x[i], DiagonalGaussian(d.mean[i], d.std[i]))) for i in range(5)]
    assert batched.tolist() == rows


def test_gaussian_logpdf_grad_check():
    rng = np.random.default_rng(1)
    x, mu, raw = leaf(rng.normal(size=4)), leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    err = grad_check(lambda: gaussian_logpdf(x, DiagonalGaussian(mu, positive_std(raw))), [mu, raw])
    assert err < 1e-6


# -- reparam_sample ----------------------------------------------------------


def test_reparam_zero_noise_returns_mean():
    mu = t([0.3, -1.2])
    assert torch.equal(reparam_sample(DiagonalGaussian(mu, t([2.0, 0.5])), t([0.0, 0.0])), mu)


def test_reparam_scalar_example():
    assert float(reparam_sample(DiagonalGaussian(t([0.0]), t([1.0])), t([0.5]))) == 0.5


def test_reparam_gradients():
    mu, sigma = leaf([0.1, 0.2, 0.3]), leaf([1.0, 2.0, 0.5])
    eps = t([0.5, -1.0, 2.0]).requires_grad_(True)
    out = reparam_sample(DiagonalGaussian(mu, sigma), eps).sum()
    g_mu, g_sigma, g_eps = torch.autograd.grad(out, [mu, sigma, eps], allow_unused=True)
    assert torch.equal(g_mu, torch.ones(3, dtype=DTYPE))
    assert torch.equal(g_sigma, eps.detach())
    assert g_eps is None
    err = grad_check(lambda: reparam_sample(DiagonalGaussian(mu, sigma), eps.detach()).sum(), [mu, sigma], eps=1e-4)
    assert err < 1e-6


def test_reparam_shape_error():
    with pytest.raises(ShapeError):
        reparam_sample(DiagonalGaussian(t([0.0, 0.0]), t([1.0, 1.0])), t([0.0]))


def test_gaussian_entropy_closed_form():
    sigma = t([0.5, 2.0])
    want = sum(0.5 * math.log(2 * math.pi * math.e * s * s) for s in (0.5, 2.0))
    assert float(gaussian_entropy(DiagonalGaussian(torch.zeros(2, dtype=DTYPE), sigma))) == pytest.approx(want)


# -- GRU -------------------------------------------------------------------------


def zero_gru(d_in, d_h):
    return {"w_x": torch.zeros(3 * d_h, d_in, dtype=DTYPE), "w_h": torch.zeros(3 * d_h, d_h, dtype=DTYPE),
            "b": torch.zeros(3 * d_h, dtype=DTYPE)}


def test_gru_zero_weights_halves_state():
    h = t([0.4, -0.8, 0.1])
    out = gru_step(zero_gru(2, 3), h, t([5.0, -7.0]))
    assert torch.allclose(out, 0.5 * h, atol=0, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_gru_output_bounded(seed):
    rng = np.random.default_rng(seed)
    p = {}
    init_gru(p, "", 4, 6, rng)
    for k in p:
        p[k] = p[k] + torch.as_tensor(rng.normal(size=p[k].shape))
    h = t(rng.uniform(-0.999, 0.999, size=(3, 6)))
    out = gru_step(p, h, t(rng.normal(size=(3, 4))))
    assert bool((out.abs() < 1).all())


def test_gru_shape_error():
    with pytest.raises((ShapeError, RuntimeError)):
        gru_step(zero_gru(2, 3), t([0.0, 0.0, 0.0]), t([1.0, 2.0, 3.0]))


@pytest.mark.parametrize("seed", range(3))
def test_gru_grad_check_dh16(seed):
    rng = np.random.default_rng(seed)
    p = {}
    init_gru(p, "", 3, 16, rng)
    p = make_leaves(p)
    h, x = leaf(rng.uniform(-0.9, 0.9, size=16)), leaf(rng.normal(size=3))
    w = t(rng.normal(size=16))
    assert grad_check(lambda: (gru_step(p, h, x) * w).sum(), [h, x, *p.values()]) < 1e-4


# -- categorical -----------------------------------------------------------------


def test_categorical_uniform_entropy():
    assert float(Categorical(torch.zeros(4, dtype=DTYPE)).entropy()) == pytest.approx(math.log(4), abs=1e-6)


def test_categorical_probs_sum_to_one():
    logits = t(np.random.default_rng(0).normal(size=(7, 5)) * 30)
    assert torch.allclose(Categorical(logits).probs.sum(-1), torch.ones(7, dtype=DTYPE), atol=1e-9)


def test_categorical_saturated_sampling():
    dist = Categorical(t([[0.0, 40.0]]).expand(100_000, 2))
    samples = dist.sample(torch.Generator().manual_seed(0))
    assert float((samples == 1).double().mean()) >= 1 - 1e-9


def test_categorical_log_prob_stable_for_large_logits():
    dist = Categorical(t([1000.0, 0.0]))
    assert float(dist.log_prob(1)) == pytest.approx(-1000.0)


def test_categorical_log_prob_grad_check():
    logits = leaf(np.random.default_rng(2).normal(size=5))
    assert grad_check(lambda: Categorical(logits).log_prob(3), [logits]) < 1e-6


def test_categorical_rejects_nonfinite():
    with pytest.raises(DomainError):
        Categorical(t([0.0, float("nan")]))


# -- layers -----------------------------------------------------------------------


def test_softplus_relu_values():
    assert float(softplus(t(0.0))) == pytest.approx(math.log(2), abs=1e-6)
    assert float(relu(t(-3.0))) == 0.0
    assert float(relu(t(3.0))) == 3.0


def test_softplus_positive_extremes():
    out = softplus(t([-700.0, -50.0, 0.0, 50.0, 700.0]))
    assert bool((out > 0).all()) and bool(torch.isfinite(out).all())
    assert bool((positive_std(t([-1e4])) >= 1e-6).all())


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear(t([[1.0, 2.0]]), torch.zeros(3, 4, dtype=DTYPE))


def test_two_layer_mlp_grad_check():
    rng = np.random.default_rng(3)
    p = {}
    init_mlp(p, "m.", [3, 5, 2], rng)
    p = make_leaves({k: v + 0.1 * torch.as_tensor(rng.normal(size=v.shape)) for k, v in p.items()})
    x = leaf(rng.normal(size=(4, 3)))
    assert grad_check(lambda: mlp(p, x, "m.", 2, final_relu=False).square().sum(), [x, *p.values()]) < 1e-4


def test_diamond_graph_accumulates():
    x = leaf(3.0)
    y = x * 2
    out = y * y + y  # d/dx = (2y + 1) * 2 = 26
    (g,) = torch.autograd.grad(out, [x])
    assert float(g) == 26.0


def test_determinism_bitwise():
    rng = np.random.default_rng(4)
    p = {}
    init_gru(p, "", 3, 5, rng)
    h, x = t(rng.uniform(-0.5, 0.5, size=5)), t(rng.normal(size=3))
    assert torch.equal(gru_step(p, h, x), gru_step(p, h, x))


# -- orthogonal init ------------------------------------------------------------------


@pytest.mark.parametrize("rows, cols", [(4, 4), (8, 3), (3, 8), (1, 1), (64, 64), (7, 128)])
def test_orthogonal_init(rows, cols):
    q = orthogonal_init(rows, cols, np.random.default_rng(0))
    assert q.shape == (rows, cols)
    gram = q.T @ q if cols <= rows else q @ q.T
    assert np.allclose(gram, np.eye(min(rows, cols)), atol=1e-6)
    if rows == cols == 1:
        assert abs(q[0, 0]) == pytest.approx(1.0)


# -- rmsprop --------------------------------------------------------------------------


def test_rmsprop_zero_grad_is_noop():
    p = {"w": t([1.0, -2.0])}
    before = p["w"].clone()
    rmsprop_step(p, {"w": torch.zeros(2, dtype=DTYPE)}, {}, lr=0.1)
    assert torch.equal(p["w"], before)


def test_clip_to_half():
    grads = [t([3.0, 4.0])]  # norm 5
    clipped, norm = clip_grad_norm(grads, 0.5)
    assert norm == pytest.approx(5.0)
    assert float(clipped[0].norm()) == pytest.approx(0.5)


def test_rmsprop_two_steps_by_hand():
    lr, alpha, eps, g = 0.01, 0.99, 1e-5, 0.3
    p, state = {"w": t([1.0])}, {}
    for _ in range(2):
        rmsprop_step(p, {"w": t([g])}, state, lr=lr, alpha=alpha, eps=eps, max_grad_norm=None)
    s1 = (1 - alpha) * g * g
    w1 = 1.0 - lr * g / (math.sqrt(s1) + eps)
    s2 = alpha * s1 + (1 - alpha) * g * g
    w2 = w1 - lr * g / (math.sqrt(s2) + eps)
    assert float(state["w"]) == pytest.approx(s2, rel=1e-15)
    assert float(p["w"]) == pytest.approx(w2, rel=1e-15)


def test_rmsprop_returns_preclip_norm():
    p = {"a": t([0.0]), "b": t([0.0])}
    norm = rmsprop_step(p, {"a": t([3.0]), "b": t([4.0])}, {}, lr=0.1)
    assert norm == pytest.approx(5.0)


# -- grad_check -----------------------------------------------------------------------


def test_grad_check_square():
    x = leaf(3.0)
    assert grad_check(lambda: x * x, [x], eps=1e-4) < 1e-8


def test_grad_check_rejects_vector_output():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        grad_check(lambda: x * 2, [x])


def test_grad_check_detects_wrong_gradient():
    x = leaf([0.5, 1.5])

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, v):
            ctx.save_for_backward(v)
            return (v ** 3).sum()

        @staticmethod
        def backward(ctx, g):
            (v,) = ctx.saved_tensors
            return g * 2 * v * v  # should be 3 v^2

    assert grad_check(lambda: Wrong.apply(x), [x]) > 0.1
