import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lstm_trader import lstm
from lstm_trader.lstm import (AdamState, NetworkConfig, adam_step, backward, forward,
                              init_glorot, mse_loss, train_on_window)


def small_config(**kw):
    base = dict(num_layers=2, hidden_size=8, window=5, dropout=0.0, iterations=10, seed=3)
    base.update(kw)
    return NetworkConfig(**base)


def reference_forward(params, x):
    """Straight-line per-time-step evaluation using the named gate matrices."""
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    seq = [np.asarray(row, dtype=float) for row in x]
    for layer in params.layers:
        H = layer.hidden_size
        h = np.zeros(H)
        c = np.zeros(H)
        new_seq = []
        for xt in seq:
            i = sig(xt @ layer.W_ix + h @ layer.W_ih + layer.b_i)
            o = sig(xt @ layer.W_ox + h @ layer.W_oh + layer.b_o)
            f = sig(xt @ layer.W_fx + h @ layer.W_fh + layer.b_f)
            hhat = xt @ layer.W_hx + h @ layer.W_hh + layer.b_h
            c = f * c + i * np.tanh(hhat)
            h = np.tanh(c) * o
            new_seq.append(h)
        seq = new_seq
    stacked = np.vstack(seq)
    return (stacked @ params.W_y + params.b_y)[:, 0], stacked


def random_params(cfg, seed, bias_scale=0.3):
    params = init_glorot(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for layer in params.layers:
        layer.b[:] = rng.normal(scale=bias_scale, size=layer.b.shape)
    params.b_y[:] = rng.normal(scale=bias_scale, size=params.b_y.shape)
    return params


def finite_difference_check(params, x, targets, step=1e-5, masks=None):
    def loss():
        out, _, _ = forward(params, x, train_mode=masks is not None, masks=masks)
        return mse_loss(out, targets)

    _, _, cache = forward(params, x, train_mode=masks is not None, masks=masks)
    grads = backward(cache, targets)
    worst = 0.0
    for (name, p), g in zip(params.named_arrays(), grads.arrays()):
        num = np.empty_like(p)
        flat = p.reshape(-1)
        nflat = num.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            lp = loss()
            flat[k] = orig - step
            lm = loss()
            flat[k] = orig
            nflat[k] = (lp - lm) / (2 * step)
        rel = np.abs(g - num) / np.maximum(np.abs(g) + np.abs(num), 1e-7)
        worst = max(worst, float(rel.max()))
    return worst


def test_init_glorot_deterministic():
    cfg = small_config()
    a, b = init_glorot(cfg, 11), init_glorot(cfg, 11)
    for x, y in zip(a.arrays(), b.arrays()):
        assert np.array_equal(x, y)
    c = init_glorot(cfg, 12)
    assert not np.array_equal(a.layers[0].Wx, c.layers[0].Wx)


def test_init_glorot_bounds_and_mean():
    cfg = NetworkConfig(num_layers=1, hidden_size=32, window=4, dropout=0.0)
    params = init_glorot(cfg, 0)
    lim_x = np.sqrt(6 / 38)
    assert np.abs(params.layers[0].W_ix).max() <= lim_x
    assert np.abs(params.layers[0].W_ih).max() <= np.sqrt(6 / 64)
    assert np.all(params.layers[0].b == 0) and np.all(params.b_y == 0)
    samples = np.concatenate([init_glorot(cfg, s).layers[0].Wh.ravel() for s in range(25)])
    assert samples.size >= 10**5
    se = samples.std() / np.sqrt(samples.size)
    assert abs(samples.mean()) < 3 * se


def test_forward_all_zero_weights_gives_bias():
    cfg = small_config(window=6)
    params = init_glorot(cfg, 0)
    for a in params.arrays():
        a[:] = 0.0
    params.b_y[:, 0] = np.arange(6.0)
    x = np.random.default_rng(0).normal(size=(6, 6))
    out, stacked, cache = forward(params, x)
    assert np.allclose(cache.i[0], 0.5) and np.allclose(cache.f[1], 0.5)
    assert np.all(stacked == 0)
    assert np.array_equal(out, np.arange(6.0))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_reference(seed):
    cfg = small_config()
    params = random_params(cfg, seed)
    x = np.random.default_rng(seed).normal(size=(5, 6))
    out, stacked, _ = forward(params, x)
    ref_out, ref_stacked = reference_forward(params, x)
    np.testing.assert_allclose(out, ref_out, rtol=0, atol=1e-12)
    np.testing.assert_allclose(stacked, ref_stacked, rtol=0, atol=1e-12)


def test_stacked_hidden_shape():
    cfg = NetworkConfig(num_layers=2, hidden_size=64, window=22, iterations=0)
    params = init_glorot(cfg, 0)
    out, stacked, _ = forward(params, np.ones((22, 6)))
    assert stacked.shape == (22, 64)
    assert out.shape == (22,)


def test_dense_weight_count():
    for H, T in [(32, 11), (64, 22), (128, 44)]:
        params = init_glorot(NetworkConfig(num_layers=2, hidden_size=H, window=T), 0)
        assert params.num_dense_params() == H * 1 + 1 * T * 1
        assert params.num_dense_params() < T * (H * 1 + 1 * 1)
    shared = init_glorot(NetworkConfig(hidden_size=32, window=11, per_position_bias=False), 0)
    assert shared.b_y.shape == (1, 1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 20.0))
def test_gate_ranges(seed, scale):
    cfg = small_config(num_layers=2, hidden_size=4, window=7)
    params = random_params(cfg, seed, bias_scale=1.0)
    x = np.random.default_rng(seed).normal(scale=scale, size=(7, 6))
    _, _, cache = forward(params, x)
    for k in range(2):
        for gate in (cache.i[k], cache.o[k], cache.f[k]):
            assert np.all((gate >= 0) & (gate <= 1))
        assert np.all(np.abs(cache.g[k]) <= 1) and np.all(np.abs(cache.h[k]) <= 1)


def test_inference_is_pure():
    cfg = small_config(dropout=0.5)
    params = random_params(cfg, 4)
    x = np.random.default_rng(1).normal(size=(5, 6))
    a = forward(params, x)[0]
    b = forward(params, x)[0]
    assert np.array_equal(a, b)
    c = forward(params, x, train_mode=True, dropout=0.5, dropout_seed=1)[0]
    assert not np.array_equal(a, c)


def test_mse_loss():
    assert mse_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse_loss([1.0, 2.0], [0.0, 0.0]) == 2.5
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=37), rng.normal(size=37)
    total = 0.0
    for u, v in zip(a, b):
        total += (u - v) * (u - v)
    assert abs(mse_loss(a, b) - total / 37) < 1e-15
    with pytest.raises(ValueError):
        mse_loss([1.0], [1.0, 2.0])


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_finite_difference(seed):
    cfg = small_config()
    params = random_params(cfg, seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 6))
    targets = rng.normal(size=5)
    assert finite_difference_check(params, x, targets) < 1e-4


def test_gradients_with_dropout_and_shared_bias():
    cfg = small_config(per_position_bias=False, dropout=0.5)
    params = random_params(cfg, 9)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 6))
    masks = lstm.dropout_masks(params, (1, 5), 0.5, rng)
    assert finite_difference_check(params, x, rng.normal(size=5), masks=masks) < 1e-4


def test_gradients_batch():
    cfg = small_config(batch_size=3, hidden_size=4)
    params = random_params(cfg, 2)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 5, 6))
    assert finite_difference_check(params, x, rng.normal(size=(3, 5))) < 1e-4


def test_detached_weights_have_zero_gradient():
    cfg = small_config()
    params = random_params(cfg, 1)
    params.W_y[:] = 0.0
    x = np.random.default_rng(0).normal(size=(5, 6))
    _, _, cache = forward(params, x)
    grads = backward(cache, np.ones(5))
    for layer in grads.layers:
        for a in (layer.Wx, layer.Wh, layer.b):
            assert np.all(a == 0)
    assert np.any(grads.W_y != 0)


def test_gradient_scales_linearly():
    cfg = small_config()
    params = random_params(cfg, 3)
    x = np.random.default_rng(3).normal(size=(5, 6))
    _, _, cache = forward(params, x)
    g1 = backward(cache, np.zeros(5))
    g2 = backward(cache, np.zeros(5), scale=2.0)
    for a, b in zip(g1.arrays(), g2.arrays()):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-14, atol=0)


def test_adam_zero_gradient_noop():
    params = init_glorot(small_config(), 0)
    before = [a.copy() for a in params.arrays()]
    state = AdamState.for_params(params)
    adam_step(params, lstm.zeros_like_params(params), state)
    for a, b in zip(before, params.arrays()):
        assert np.array_equal(a, b)


def _scalar_params(value):
    p = init_glorot(NetworkConfig(num_layers=1, hidden_size=1, window=1, input_size=1), 0)
    for a in p.arrays():
        a[:] = 0.0
    p.W_y[:] = value
    return p


def test_adam_first_step_hand_value():
    params = _scalar_params(0.0)
    grads = lstm.zeros_like_params(params)
    grads.W_y[:] = 1.0
    state = AdamState.for_params(params, base_lr=0.01)
    adam_step(params, grads, state)
    assert params.W_y[0, 0] == pytest.approx(-0.01 / (1.0 + 1e-8), rel=1e-12)


def test_adam_constant_gradient_unit_ratio():
    params = _scalar_params(0.0)
    grads = lstm.zeros_like_params(params)
    grads.W_y[:] = 0.37
    state = AdamState.for_params(params, base_lr=1e-3, decay=1.0)
    prev = 0.0
    for _ in range(500):
        adam_step(params, grads, state)
        step = prev - params.W_y[0, 0]
        prev = params.W_y[0, 0]
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_learning_rate_schedule():
    state = AdamState.for_params(_scalar_params(0.0), base_lr=0.01, decay=0.96, decay_steps=100)
    assert state.learning_rate(0) == 0.01
    assert state.learning_rate(100) == pytest.approx(0.0096)
    assert state.learning_rate(50) == pytest.approx(0.01 * 0.96 ** 0.5)


def test_train_zero_iterations_is_identity():
    cfg = small_config(iterations=0)
    params = init_glorot(cfg, 0)
    res = train_on_window(params, np.ones((5, 6)), np.ones(5), cfg)
    for a, b in zip(params.arrays(), res.params.arrays()):
        assert np.array_equal(a, b)


def test_train_deterministic_and_reduces_loss():
    cfg = small_config(iterations=200, dropout=0.3)
    params = init_glorot(cfg, 0)
    t = np.arange(6)
    prices = 1.0 + 0.05 * np.sin(t / 2.0)
    x = np.column_stack([prices[1:]] * 5 + [prices[:-1]])
    tgt = 1.0 + 0.05 * np.sin((t[1:] + 1) / 2.0)
    a = train_on_window(params, x, tgt, cfg)
    b = train_on_window(params, x, tgt, cfg)
    for u, v in zip(a.params.arrays(), b.params.arrays()):
        assert np.array_equal(u, v)
    assert a.final_loss < 0.1 * a.initial_loss


def test_train_divergence_signalled():
    cfg = small_config(iterations=5, base_lr=1e300)
    params = init_glorot(cfg, 0)
    with pytest.raises(lstm.TrainingDiverged) as info:
        train_on_window(params, np.full((5, 6), 1e3), np.full(5, 1e300), cfg)
    assert info.value.last_finite >= -1


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config(per_position_bias=False)
    params = random_params(cfg, 8)
    path = tmp_path / "ck.npz"
    lstm.save_params(path, params, cfg, {"last_date": "2010-01-04"})
    back, cfg2, meta = lstm.load_params(path)
    assert cfg2 == cfg and meta == {"last_date": "2010-01-04"}
    for (n1, a), (n2, b) in zip(params.named_arrays(), back.named_arrays()):
        assert n1 == n2 and np.array_equal(a, b)
