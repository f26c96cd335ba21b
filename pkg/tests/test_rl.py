import math

import numpy as np
import pytest
import torch

from beliefrl.config import RunConfig, make_env
from beliefrl.diffmath import DTYPE
from beliefrl.envs import DiscreteHMM, MountainHike, MountainHikeParams
from beliefrl.errors import ContractError
from beliefrl.rl import (
    Agent,
    RolloutSegment,
    Trainer,
    TrainingDiverged,
    a2c_losses,
    clone_params,
    compute_targets,
    elbo_loss,
    evaluate,
    joint_loss,
)


def small_config(kind="dvrl", **train):
    cfg = RunConfig()
    cfg.encoder.kind = kind
    cfg.encoder.K = 3
    cfg.encoder.d_h = cfg.encoder.d_z = 6
    cfg.encoder.rnn_d_h = 8
    cfg.encoder.obs_embed = cfg.encoder.action_embed = 5
    cfg.train.n_e = 2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


def fake_segment(log_probs, values, entropies=None, elbo=None):
    lp = torch.as_tensor(np.asarray(log_probs, dtype=float), dtype=DTYPE)
    v = torch.as_tensor(np.asarray(values, dtype=float), dtype=DTYPE)
    ent = torch.zeros_like(v) if entropies is None else torch.as_tensor(np.asarray(entropies, dtype=float))
    return RolloutSegment(
        observations=np.zeros(v.shape + (2,)), actions=[], rewards=np.zeros(v.shape),
        dones=np.zeros(v.shape, dtype=bool), log_probs=lp, values=v, entropies=ent,
        elbo_terms=None if elbo is None else torch.as_tensor(np.asarray(elbo, dtype=float)),
        bootstrap_value=torch.zeros(v.shape[1], dtype=DTYPE))


# -- targets ------------------------------------------------------------------


def test_targets_examples():
    assert compute_targets([[2.0]], [[False]], [10.0], 0.9)[0, 0] == pytest.approx(11.0)
    assert compute_targets([[2.0]], [[True]], [10.0], 0.9)[0, 0] == 2.0
    out = compute_targets([[1.0], [1.0], [1.0]], [[False]] * 3, [0.0], 0.5)
    assert out[:, 0].tolist() == [1.75, 1.5, 1.0]


def test_targets_done_at_last_step_has_no_bootstrap():
    # two-step episode: the terminal step's target is its reward alone
    out = compute_targets([[0.5], [2.0]], [[False], [True]], [100.0], 0.9)
    assert out[:, 0].tolist() == [0.5 + 0.9 * 2.0, 2.0]


def test_targets_done_in_middle_cuts_the_sum():
    out = compute_targets([[1.0], [5.0], [1.0]], [[True], [False], [False]], [4.0], 0.5)
    assert out[:, 0].tolist() == [1.0, 5.0 + 0.5 * (1.0 + 0.5 * 4.0), 1.0 + 0.5 * 4.0]


def test_targets_shape_mismatch():
    with pytest.raises(ContractError):
        compute_targets(np.zeros((3, 2)), np.zeros((3, 1), dtype=bool), np.zeros(2), 0.9)
    with pytest.raises(ContractError):
        compute_targets(np.zeros((3, 2)), np.zeros((3, 2), dtype=bool), np.zeros(3), 0.9)


# -- losses ----------------------------------------------------------------------


def test_zero_advantage():
    seg = fake_segment([[-0.3, -1.2]], [[2.0, 3.0]])
    l_a, l_v, _ = a2c_losses(seg, [[2.0, 3.0]])
    assert l_a.item() == 0.0 and l_v.item() == 0.0


def test_single_entry_losses():
    l_a, l_v, _ = a2c_losses(fake_segment([[-0.5]], [[1.0]]), [[3.0]])
    assert l_a.item() == pytest.approx(1.0)
    assert l_v.item() == pytest.approx(4.0)


def test_uniform_policy_entropy_loss():
    from beliefrl.diffmath import Categorical

    ent = Categorical(torch.zeros(3, 2, 4, dtype=DTYPE)).entropy()
    _, _, l_h = a2c_losses(fake_segment(np.zeros((3, 2)), np.zeros((3, 2)), ent.numpy()), np.zeros((3, 2)))
    assert l_h.item() == pytest.approx(-math.log(4))
    assert l_h.item() == pytest.approx(-1.386294, abs=1e-6)


def test_advantage_is_detached_in_policy_loss():
    values = torch.tensor([[0.7, -0.2]], dtype=DTYPE, requires_grad=True)
    seg = fake_segment([[-0.5, -1.0]], [[0.0, 0.0]])
    seg.values = values
    l_a, l_v, _ = a2c_losses(seg, [[1.0, 2.0]])
    assert not l_a.requires_grad
    (g,) = torch.autograd.grad(l_v, values)
    assert torch.allclose(g, -(torch.tensor([[1.0, 2.0]], dtype=DTYPE) - values.detach()))


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        a2c_losses(fake_segment([[0.0, 0.0]], [[0.0, 0.0]]), [[0.0]])


def test_elbo_loss_examples():
    assert elbo_loss(fake_segment(np.zeros((3, 2)), np.zeros((3, 2)), elbo=np.full((3, 2), -2.5))).item() == 2.5
    assert elbo_loss(fake_segment([[0.0], [0.0]], [[0.0], [0.0]], elbo=[[-1.0], [-3.0]])).item() == 2.0
    with pytest.raises(ContractError):
        elbo_loss(fake_segment([[0.0]], [[0.0]]))


def test_joint_loss_examples_and_linearity():
    la, lh, lv, le = (torch.tensor(x, dtype=DTYPE) for x in (0.7, -1.3, 2.2, 5.0))
    assert joint_loss(la, lh, lv, le, 0.0, 0.0, 0.0).item() == pytest.approx(0.7)
    assert joint_loss(torch.tensor(0.0), lh, lv, le, 0.0, 0.0, 1.0).item() == pytest.approx(5.0)
    base = joint_loss(la, lh, lv, le, 0.01, 0.5, 1.0).item()
    for idx, term in ((0, -1.3), (1, 2.2), (2, 5.0)):
        lam = [0.01, 0.5, 1.0]
        lam[idx] += 0.25
        moved = joint_loss(la, lh, lv, le, *lam).item()
        assert moved - base == pytest.approx(0.25 * term)
    assert joint_loss(la, lh, lv, None, 0.01, 0.5, 1.0).item() == pytest.approx(0.7 - 0.013 + 1.1)


# -- trainer -------------------------------------------------------------------------


def test_default_batch_size_is_80():
    cfg = RunConfig()
    assert cfg.train.n_e * cfg.train.n_s == 80
    tr = Trainer(small_config(n_e=16))
    assert tr.batch_size == 80
    rec = tr.train_segment()
    assert rec.frames == 80 and rec.segment == 1
    assert tr.last_segment.shape == (5, 16)


def test_window_equal_to_segment_detaches_every_boundary():
    tr = Trainer(small_config(n_g=5))
    for _ in range(3):
        tr.train_segment()
        assert tr.at_cut
        assert not tr.latent.h.requires_grad
        assert not tr.segment_start_latent.h.requires_grad


def test_window_spanning_two_segments():
    tr = Trainer(small_config(n_g=10))
    tr.train_segment()
    assert not tr.at_cut and tr.latent.h.requires_grad
    tr.train_segment()
    # the second segment started from a latent that still carried the first graph
    assert tr.segment_start_latent.h.grad_fn is not None
    assert tr.at_cut and not tr.latent.h.requires_grad


def test_gradient_reaches_previous_segment_inside_window():
    tr = Trainer(small_config(n_g=10, lambda_h=0.0, lambda_v=0.0))
    tr.train_segment()
    view = clone_params(tr.params)
    seg = tr.rollout(view)
    start = tr.segment_start_latent
    (g,) = torch.autograd.grad(elbo_loss(seg), start.h, retain_graph=True)
    assert g.abs().sum() > 0


def test_bootstrap_value_is_detached():
    tr = Trainer(small_config())
    seg = tr.rollout(clone_params(tr.params))
    assert not seg.bootstrap_value.requires_grad
    assert seg.values.requires_grad


def test_policy_loss_has_no_value_gradient():
    tr = Trainer(small_config())
    view = clone_params(tr.params)
    seg = tr.rollout(view)
    targets = compute_targets(seg.rewards, seg.dones, seg.bootstrap_value.numpy(), 0.99)
    l_a, l_v, _ = a2c_losses(seg, targets)
    eta = list(view["eta"].values())
    assert all(g is None or not g.any() for g in torch.autograd.grad(l_a, eta, retain_graph=True, allow_unused=True))
    assert any(g is not None and g.any() for g in torch.autograd.grad(l_v, eta, allow_unused=True))


def _theta_grads(cfg):
    tr = Trainer(cfg)
    view = clone_params(tr.params)
    seg = tr.rollout(view)
    targets = compute_targets(seg.rewards, seg.dones, seg.bootstrap_value.numpy(), 0.99)
    l_a, l_v, l_h = a2c_losses(seg, targets)
    total = joint_loss(l_a, l_h, l_v, elbo_loss(seg), cfg.train.lambda_h, cfg.train.lambda_v, cfg.train.lambda_e)
    theta = [v for k, v in view["theta"].items() if k.startswith("rnn.")]
    grads = torch.autograd.grad(total, theta, allow_unused=True)
    return sum(0.0 if g is None else float(g.abs().sum()) for g in grads)


def test_no_elbo_still_trains_encoder_through_rl_loss():
    assert _theta_grads(small_config(lambda_e=0.0)) > 0


def test_no_joint_optim_and_no_elbo_leaves_encoder_untouched():
    assert _theta_grads(small_config(lambda_e=0.0, joint_optim=False)) == 0


def test_lambda_e_zero_drops_the_elbo_term():
    la, lh, lv, le = (torch.tensor(x, dtype=DTYPE) for x in (0.7, -1.3, 2.2, 1e6))
    assert joint_loss(la, lh, lv, le, 0.01, 0.5, 0.0).item() == joint_loss(la, lh, lv, None, 0.01, 0.5, 0.0).item()


def test_reset_on_done_restarts_latent_and_action():
    cfg = small_config(n_s=4)
    cfg.env.name = "noisy_guess"
    cfg.env.horizon = 2
    tr = Trainer(cfg)
    before = clone_params(tr.params)
    tr.train_segment()
    seg = tr.last_segment
    assert seg.dones[1].all() and seg.dones[3].all() and not seg.dones[0].any()
    assert (tr.prev_action == 0).all()
    # the reset uses the parameters the segment was rolled out with
    init = tr.agent.encoder.initial_state(before, 2)
    assert torch.equal(tr.latent.h.detach(), init.h.detach())


def test_rnn_trainer_runs_without_elbo():
    tr = Trainer(small_config("rnn"))
    rec = tr.train_segment()
    assert math.isnan(rec.loss_elbo) and math.isnan(rec.ess_mean)
    assert tr.last_segment.elbo_terms is None


def test_rnn_recon_supplies_elbo_slot():
    cfg = small_config("rnn")
    cfg.encoder.recon_loss = True
    rec = Trainer(cfg).train_segment()
    assert math.isfinite(rec.loss_elbo)


def test_run_counts_frames():
    tr = Trainer(small_config())
    recs = tr.run(35)
    assert [r.frames for r in recs] == [10, 20, 30]
    assert all(math.isfinite(r.grad_norm) for r in recs)


def test_divergence_reports_diagnostics():
    tr = Trainer(small_config())
    with torch.no_grad():
        tr.params["eta"]["v.b"].fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as info:
        tr.train_segment()
    diag = info.value.diagnostics
    assert {"frames", "loss_policy", "loss_value", "ess_mean"} <= set(diag)


# -- evaluation -----------------------------------------------------------------------


def flat_hike(c):
    return MountainHike(MountainHikeParams(ridge_slope=0.0, basin=-c))


def zero_policy(agent, seed=0):
    params = agent.init_params(seed)
    with torch.no_grad():
        params["rho"]["mean.w"].zero_()
        params["rho"]["mean.b"].zero_()
    return params


def test_evaluate_constant_reward():
    env = flat_hike(0.25)
    agent = Agent(small_config(), env)
    mean, std, returns = evaluate(agent, zero_policy(agent), env, episodes=3, greedy=True)
    assert mean == pytest.approx(75 * 0.25) and std == pytest.approx(0.0, abs=1e-12)
    assert len(returns) == 3


def test_evaluate_zero_rewards():
    env = DiscreteHMM(np.eye(2), np.eye(2), np.array([0.5, 0.5]), rewards=np.zeros((2, 2)), horizon=4)
    cfg = small_config()
    agent = Agent(cfg, env)
    mean, _, _ = evaluate(agent, agent.init_params(0), env, episodes=5)
    assert mean == 0.0


def test_evaluate_is_repeatable():
    cfg = small_config()
    env = make_env(cfg.env)
    agent = Agent(cfg, env)
    params = agent.init_params(1)
    a = evaluate(agent, params, env, episodes=2, seed=3)
    b = evaluate(agent, params, env, episodes=2, seed=3)
    assert a[0] == b[0] and np.array_equal(a[2], b[2])


def test_evaluate_env_mismatch():
    cfg = small_config()
    agent = Agent(cfg, make_env(cfg.env))
    cfg.env.name = "noisy_guess"
    with pytest.raises(ContractError):
        evaluate(agent, agent.init_params(0), make_env(cfg.env), episodes=1)
