import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from beliefrl import checkpoint as ckpt_io
from beliefrl.config import RunConfig, config_from_text
from beliefrl.envs import DiscreteHMM, mountain_hike_step
from beliefrl.inference import elbo_term, ess, exact_belief_update, normalized_weights, resample_ancestors
from beliefrl.rl import compute_targets
from beliefrl.verify import brute_force_targets

finite = st.floats(-50, 50, allow_nan=False)
logws = arrays(np.float64, st.integers(1, 40), elements=finite)


@given(logws)
def test_ess_in_range(logw):
    e = ess(logw)
    assert 1 - 1e-9 <= e <= len(logw) + 1e-9


@given(logws, st.floats(-1e3, 1e3))
def test_elbo_shift(logw, c):
    assert math.isclose(elbo_term(logw + c) - c, elbo_term(logw), abs_tol=1e-9)


@given(logws)
def test_elbo_between_mean_and_max(logw):
    # log of a mean lies between the mean of logs and the max
    v = elbo_term(logw)
    assert logw.mean() - 1e-9 <= v <= logw.max() + 1e-9


@given(logws, st.integers(0, 2**32 - 1))
def test_resampling_picks_supported_particles(logw, seed):
    logw = logw.copy()
    logw[::2] = -np.inf
    if not np.isfinite(logw).any():
        logw[-1] = 0.0
    idx = resample_ancestors(logw, np.random.default_rng(seed))
    assert np.isfinite(logw[idx]).all()
    assert math.isclose(normalized_weights(logw).sum(), 1.0, rel_tol=1e-12)


dyadic = st.sampled_from([-2.0, -1.0, -0.5, 0.0, 0.25, 0.5, 1.0, 3.0])


@given(st.integers(1, 8), st.integers(1, 4), st.data(), st.sampled_from([0.0, 0.5, 0.75, 0.875, 0.9375]))
def test_targets_match_enumeration(n, e, data, gamma):
    r = data.draw(arrays(np.float64, (n, e), elements=dyadic))
    d = data.draw(arrays(np.bool_, (n, e)))
    b = data.draw(arrays(np.float64, (e,), elements=dyadic))
    got = compute_targets(r, d, b, gamma)
    want = brute_force_targets(r.tolist(), d.tolist(), b.tolist(), gamma)
    assert all(got[j, k] == want[j][k] for j in range(n) for k in range(e))


@given(st.integers(2, 4), st.integers(2, 3), st.integers(0, 2**32 - 1), st.data())
def test_belief_update_valid_distribution(n, m, seed, data):
    rng = np.random.default_rng(seed)
    model = DiscreteHMM(rng.dirichlet(np.ones(n), size=n), rng.dirichlet(np.ones(m), size=n),
                        rng.dirichlet(np.ones(n)))
    o = data.draw(st.integers(0, m - 1))
    b, logz = exact_belief_update(model, model.initial, 0, o)
    assert (b >= 0).all() and math.isclose(b.sum(), 1.0, abs_tol=1e-12)
    assert logz <= 1e-12


@given(arrays(np.float64, 2, elements=st.floats(-20, 20)), arrays(np.float64, 2, elements=st.floats(-1e3, 1e3)))
def test_hike_step_capped(s, a):
    s2, _, r, _ = mountain_hike_step(s, a, None)
    assert np.linalg.norm(s2 - s) <= 0.5 + 1e-9
    assert math.isfinite(r)


entry_arrays = st.one_of(
    arrays(np.float64, st.lists(st.integers(0, 4), max_size=3).map(tuple), elements=st.floats(allow_nan=False)),
    arrays(np.int64, st.lists(st.integers(0, 4), max_size=2).map(tuple)),
    st.binary(max_size=30).map(lambda b: np.frombuffer(b, dtype=np.uint8).copy()),
)


@settings(max_examples=50)
@given(st.dictionaries(st.text(min_size=1, max_size=12), entry_arrays, max_size=6))
def test_checkpoint_format_roundtrip(entries):
    ck = ckpt_io.Checkpoint(entries)
    data = ckpt_io.to_bytes(ck)
    back = ckpt_io.from_bytes(data)
    assert list(back.arrays) == list(entries)
    for k, v in entries.items():
        assert back.arrays[k].shape == v.shape and np.array_equal(back.arrays[k], v)
    assert ckpt_io.to_bytes(back) == data


@given(st.integers(1, 64), st.integers(1, 10), st.floats(0, 0.999), st.floats(1e-8, 1.0), st.booleans())
def test_config_text_roundtrip(K, n_s, gamma, lr, joint):
    cfg = RunConfig()
    cfg.encoder.K, cfg.train.n_s, cfg.train.n_g = K, n_s, 5 * n_s
    cfg.train.gamma, cfg.train.lr, cfg.train.joint_optim = gamma, lr, joint
    assert config_from_text(cfg.to_text(), environ={}) == cfg.validate()
