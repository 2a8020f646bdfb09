import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from whathow import contextrnn as cr
from oracles import central_diff, rel_error


def make_bank(seed=0, n_slots=4, alloc=(0, 1, 2), **kw):
    cfg = cr.RNNConfig(n_hidden=kw.pop("n_hidden", 8), rank=kw.pop("rank", 2), n_slots=n_slots, **kw)
    bank = cr.ContextBank.empty(cfg)
    rng = np.random.default_rng(seed)
    for z in alloc:
        cr.allocate_context(bank, z, rng)
    # non-zero biases so their gradients are exercised too
    bank.b_in[list(alloc)] = rng.normal(scale=0.1, size=(len(alloc), cfg.n_hidden))
    bank.b_out[list(alloc)] = rng.normal(scale=0.1, size=(len(alloc), cfg.output_dim))
    return bank


def random_gating(rng, B, T, Z, active):
    p = np.zeros((B, T, Z))
    p[..., list(active)] = rng.dirichlet(np.ones(len(active)), size=(B, T))
    return p


def test_single_context_composition():
    bank = make_bank()
    w = cr.compose_weights(bank, np.array([0, 1.0, 0, 0]))
    np.testing.assert_allclose(w["W_rec"], bank.U[1] @ bank.V[1].T, atol=1e-15, rtol=0)
    np.testing.assert_array_equal(w["W_in"], bank.W_in[1])
    half = cr.compose_weights(bank, np.array([0.5, 0.5, 0, 0]))
    mean = (bank.U[0] @ bank.V[0].T + bank.U[1] @ bank.V[1].T) / 2
    np.testing.assert_allclose(half["W_rec"], mean, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(0, 1))
def test_composition_is_linear_in_gating(seed, a):
    bank = make_bank(seed % 1000)
    rng = np.random.default_rng(seed)
    p = np.r_[rng.dirichlet(np.ones(3)), 0]
    q = np.r_[rng.dirichlet(np.ones(3)), 0]
    mix = cr.compose_weights(bank, a * p + (1 - a) * q)
    wp, wq = cr.compose_weights(bank, p), cr.compose_weights(bank, q)
    for k in mix:
        np.testing.assert_allclose(mix[k], a * wp[k] + (1 - a) * wq[k], atol=1e-9, rtol=0)


def test_effective_rank_bound():
    bank = make_bank(n_hidden=20, rank=2, alloc=(0, 1, 2))
    for active in ([0], [0, 1], [0, 1, 2]):
        p = np.zeros(4)
        p[active] = 1 / len(active)
        sv = np.linalg.svd(cr.compose_weights(bank, p)["W_rec"], compute_uv=False)
        assert np.sum(sv > 1e-10 * sv[0]) <= 2 * len(active)


def test_unallocated_slot_contributes_nothing():
    bank = make_bank()
    bank.U[3] = 100.0  # stray values in a free slot are ignored
    a = cr.compose_weights(bank, np.array([0.5, 0.5, 0, 0]))
    b = cr.compose_weights(bank, np.array([0.4, 0.4, 0, 0.2]))
    for k in a:
        np.testing.assert_allclose(a[k], b[k], atol=1e-15)
    with pytest.raises(cr.RNNError):
        cr.normalize_gating(bank, np.array([0, 0, 0, 1.0]))


def test_allocation_scale_and_guard():
    cfg = cr.RNNConfig(n_hidden=256, rank=3, n_slots=1)
    rng = np.random.default_rng(0)
    norms = []
    for _ in range(100):
        bank = cr.allocate_context(cr.ContextBank.empty(cfg), 0, rng)
        norms.append(np.linalg.norm(bank.U[0] @ bank.V[0].T, 2))
    assert max(norms) < 3
    with pytest.raises(cr.RNNError):
        cr.allocate_context(bank, 0, rng)


def test_step_special_cases():
    cfg = cr.RNNConfig(n_hidden=6, sigma_r=0.0)
    zero = {"W_rec": np.zeros((6, 6)), "W_in": np.zeros((6, 5)), "b_in": np.zeros(6)}
    h = np.arange(6.0)
    np.testing.assert_allclose(cr.step(h, np.zeros(5), zero, cfg), 0.9 * h, atol=1e-15)
    rng = np.random.default_rng(1)
    w = {"W_rec": rng.normal(size=(6, 6)), "W_in": rng.normal(size=(6, 5)), "b_in": rng.normal(size=6)}
    s = rng.normal(size=5)
    one = cr.RNNConfig(n_hidden=6, alpha=1.0, sigma_r=0.0)
    np.testing.assert_allclose(cr.step(h, s, w, one), w["W_rec"] @ np.maximum(h, 0) + w["W_in"] @ s + w["b_in"],
                               atol=1e-12)


def test_step_noise_variance():
    cfg = cr.RNNConfig(n_hidden=4, alpha=0.1, sigma_r=0.05)
    zero = {"W_rec": np.zeros((4, 4)), "W_in": np.zeros((4, 5)), "b_in": np.zeros(4)}
    h = np.zeros((100_000, 4))
    out = cr.step(h, np.zeros(5), zero, cfg, np.random.default_rng(2))
    expected = cfg.alpha**2 * (2 / cfg.alpha) * cfg.sigma_r**2
    assert abs(out.var(axis=0).mean() / expected - 1) < 0.03


def test_forward_with_constant_gating_is_plain_low_rank_rnn():
    bank = make_bank(3)
    rng = np.random.default_rng(3)
    s = rng.normal(size=(2, 7, 5))
    p = np.zeros((2, 7, 4))
    p[..., 2] = 1.0
    y_hat, _ = cr.forward_trial(bank, p, s)
    w = cr.compose_weights(bank, p[0, 0])
    for b in range(2):
        h = np.zeros(8)
        for t in range(7):
            h = cr.step(h, s[b, t], w, bank.cfg)
            np.testing.assert_allclose(y_hat[b, t], w["W_out"] @ np.maximum(h, 0) + w["b_out"], atol=1e-12)


def test_gating_order_matters():
    bank = make_bank(4)
    rng = np.random.default_rng(4)
    s = rng.normal(size=(6, 5))
    p = random_gating(rng, 1, 6, 4, (0, 1, 2))[0]
    a, _ = cr.forward_trial(bank, p, s)
    b, _ = cr.forward_trial(bank, p[::-1], s)
    assert np.abs(a - b).max() > 1e-3


def test_noise_off_is_pure_and_noise_on_is_seeded():
    bank = make_bank(5, sigma_r=0.05)
    rng = np.random.default_rng(5)
    s = rng.normal(size=(3, 6, 5))
    p = random_gating(rng, 3, 6, 4, (0, 1))
    a, _ = cr.forward_trial(bank, p, s, np.random.default_rng(0), noise=False)
    b, _ = cr.forward_trial(bank, p, s, None)
    assert np.array_equal(a, b)
    c1, _ = cr.forward_trial(bank, p, s, np.random.default_rng(9))
    c2, _ = cr.forward_trial(bank, p, s, np.random.default_rng(9))
    assert np.array_equal(c1, c2) and not np.array_equal(a, c1)


def test_loss_values():
    resp = np.array([False, True])
    z = np.array([[0, 1]])
    y = np.zeros((1, 2, 3))
    assert cr.weighted_mse(y, y, cr.loss_mask(z, resp)) == 0.0
    all_resp = cr.loss_mask(np.array([[1, 1]]), resp)
    assert cr.weighted_mse(y + 1, y, all_resp) == pytest.approx(1.0)
    # step 0 weighs 0.2, step 1 weighs 1: (0.2 * (1 + 4 + 0) + 1 * (9 + 0 + 1)) / 6
    y_hat = np.array([[[1.0, 2.0, 0.0], [3.0, 0.0, -1.0]]])
    assert cr.weighted_mse(y_hat, y, cr.loss_mask(z, resp)) == pytest.approx((0.2 * 5 + 10) / 6)


def fd_check(seed, B=2, T=5):
    """Largest relative error between backprop and central differences for one instance."""
    bank = make_bank(seed, n_hidden=8, rank=2, sigma_r=0.0, activation="tanh" if seed % 2 else "relu")
    rng = np.random.default_rng(seed + 1000)
    p = random_gating(rng, B, T, 4, (0, 1, 2))
    s = rng.normal(size=(B, T, 5))
    y = rng.normal(size=(B, T, 3))
    mask = np.where(rng.random((B, T, 1)) < 0.5, 1.0, 0.2).repeat(3, axis=2)
    y_hat, cache = cr.forward_trial(bank, p, s)
    grads = cr.backward_trial(bank, cache, y, mask)

    def loss():
        return cr.weighted_mse(cr.forward_trial(bank, p, s)[0], y, mask)

    num = central_diff(loss, bank.params())
    return max(rel_error(grads[k], num[k]) for k in cr.PARAM_NAMES)


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed):
    assert fd_check(seed) < 1e-4


def test_ungated_context_gets_zero_gradient_and_readout_bias_closed_form():
    bank = make_bank(6)
    rng = np.random.default_rng(6)
    p = random_gating(rng, 2, 5, 4, (0, 2))
    s, y = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 5, 3))
    mask = cr.loss_mask(np.zeros((2, 5), int), np.array([False]))
    y_hat, cache = cr.forward_trial(bank, p, s)
    g = cr.backward_trial(bank, cache, y, mask)
    for k in cr.PARAM_NAMES:
        assert not g[k][1].any() and not g[k][3].any()
    expected = np.einsum("btz,bto->zo", p, 2 * mask * (y_hat - y)) / y.size
    np.testing.assert_allclose(g["b_out"], expected, atol=1e-14)


def test_adam_leaves_params_alone_without_gradient():
    bank = make_bank(7)
    before = bank.copy()
    state = cr.TrainState.for_bank(bank, l2=0.0)
    zeros = {k: np.zeros_like(v) for k, v in bank.params().items()}
    cr.adam_step(bank, state, zeros, np.array([0.5, 0.5, 0, 0]))
    assert bank.checksum() == before.checksum()


def _train(seed, steps=5):
    bank = make_bank(8)
    model = cr.ContextRNN(bank.cfg, bank)
    rng = np.random.default_rng(seed)
    data = np.random.default_rng(0)
    for _ in range(steps):
        p = random_gating(data, 4, 6, 4, (0, 1))
        s, y = data.normal(size=(4, 6, 5)), data.normal(size=(4, 6, 3))
        model.train_batch(p, s, y, np.ones_like(y), rng)
    return model


def test_training_is_deterministic_and_isolated():
    a, b = _train(1), _train(1)
    assert a.bank.checksum() == b.bank.checksum()
    untouched = make_bank(8)
    # slot 2 was allocated but never gated: weights and optimiser moments stay exactly as they were
    assert a.bank.checksum([2]) == untouched.checksum([2])
    assert all(not a.state.m[k][2].any() and not a.state.v[k][2].any() for k in cr.PARAM_NAMES)
    assert a.state.steps.tolist() == [5, 5, 0, 0]
    assert a.bank.checksum([0]) != untouched.checksum([0])


def test_usage_threshold_and_learning_rate_decay():
    bank = make_bank(9)
    state = cr.TrainState.for_bank(bank)
    grads = {k: np.ones_like(v) for k, v in bank.params().items()}
    before = bank.copy()
    cr.adam_step(bank, state, grads, np.array([0.9995, 0.0005, 0, 0]))
    assert bank.checksum([1]) == before.checksum([1]) and bank.checksum([0]) != before.checksum([0])
    hit = cr.decay_learning_rates(state, np.array([0.9995, 0.0005, 0, 0]))
    assert hit.tolist() == [True, False, False, False]
    np.testing.assert_allclose(state.lr, [5e-4, 1e-3, 1e-3, 1e-3])


def test_performance_measure():
    T = 10
    resp = np.zeros(T, bool)
    resp[6:] = True
    y = np.zeros((1, T, 3))
    y[0, 6:] = [math.cos(1.0), math.sin(1.0), 1]
    assert cr.evaluate_perf(y, y, resp).tolist() == [True]
    early = y.copy()
    early[0, 3, 2] = 0.6  # breaks fixation before the response
    assert cr.evaluate_perf(early, y, resp).tolist() == [False]
    late = y.copy()
    late[0, 7, 2] = 0.0  # the third output is free after the response starts
    assert cr.evaluate_perf(late, y, resp).tolist() == [True]
    off = y.copy()
    off[0, 6:, :2] = [math.cos(1.0 + math.pi / 9), math.sin(1.0 + math.pi / 9)]
    assert cr.evaluate_perf(off, y, resp).tolist() == [False]
    near = y.copy()
    near[0, 6:, :2] = [math.cos(1.0 + math.pi / 11), math.sin(1.0 + math.pi / 11)]
    assert cr.evaluate_perf(near, y, resp).tolist() == [True]


def test_checkpoint_round_trip(tmp_path):
    model = _train(2)
    cr.save_bank(model.bank, tmp_path / "bank.npz", model.state)
    bank, state = cr.load_bank(tmp_path / "bank.npz")
    assert bank.checksum() == model.bank.checksum() and bank.cfg == model.bank.cfg
    assert np.array_equal(bank.allocated, model.bank.allocated)
    for k in cr.PARAM_NAMES:
        assert np.array_equal(state.m[k], model.state.m[k]) and np.array_equal(state.v[k], model.state.v[k])
    assert np.array_equal(state.steps, model.state.steps) and np.array_equal(state.lr, model.state.lr)
    with pytest.raises(cr.RNNError):
        cr.load_checkpoint(tmp_path / "bank.npz", payload="baseline_adam")
