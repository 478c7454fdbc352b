import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sysidlab import nn

from oracles import (
    finite_difference_grads,
    naive_mse,
    relative_error,
    scalar_forward,
    scalar_lstm_step,
)


def perturbed_net(sizes, seed, scale=0.3):
    net = nn.init_network(sizes, seed)
    rng = np.random.default_rng(seed + 1000)
    for arr in net.tensors():
        arr += rng.normal(0.0, scale, arr.shape)
    return net


def zero_net(sizes=(3, 4)):
    net = nn.init_network(sizes, 0)
    for arr in net.tensors():
        arr[...] = 0.0
    return net


# --- cell ------------------------------------------------------------------


def test_cell_zero_params_gives_zero_state():
    p = zero_net((3,)).lstm[0]
    h, c, cache = nn.lstm_cell_forward(p, np.array([0.7, -0.2]), np.zeros(3), np.zeros(3))
    assert not h.any() and not c.any()
    np.testing.assert_array_equal(cache["i"], 0.5)
    np.testing.assert_array_equal(cache["g"], 0.0)


def test_cell_forget_half():
    p = zero_net((3,)).lstm[0]
    c_prev = np.array([0.4, -2.0, 1.0])
    _, c, _ = nn.lstm_cell_forward(p, np.zeros(2), np.zeros(3), c_prev)
    np.testing.assert_array_equal(c, 0.5 * c_prev)


def test_cell_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    p = perturbed_net((3,), 4).lstm[0]
    x, h0, c0 = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
    h, c, _ = nn.lstm_cell_forward(p, x, h0, c0)
    ho, co = scalar_lstm_step(p.W.tolist(), p.U.tolist(), p.b.tolist(), x.tolist(), h0.tolist(), c0.tolist())
    np.testing.assert_allclose(h, ho, rtol=0, atol=1e-15)
    np.testing.assert_allclose(c, co, rtol=0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_cell_activation_bounds(seed, scale):
    rng = np.random.default_rng(seed)
    p = perturbed_net((4,), seed % 100).lstm[0]
    _, c, cache = nn.lstm_cell_forward(p, scale * rng.normal(size=2), rng.normal(size=4), rng.normal(size=4))
    for gate in ("i", "f", "o"):
        assert np.all((cache[gate] >= 0) & (cache[gate] <= 1))
    assert np.all(np.abs(cache["tanh_c"]) <= 1)


def test_gate_views():
    net = nn.init_network((3,), 0)
    W, U, b = net.lstm[0].gate("forget")
    assert W.shape == (3, 2) and U.shape == (3, 3)
    np.testing.assert_array_equal(b, 1.0)


# --- forward -----------------------------------------------------------------


def test_zero_params_zero_predictions():
    pred, _ = nn.forward(zero_net(), np.random.default_rng(0).normal(size=(2, 7, 2)))
    assert pred.shape == (2, 7, 1) and not pred.any()


def test_identical_sequences_identical_rows():
    net = perturbed_net((3, 4, 2), 1)
    seq = np.random.default_rng(1).normal(size=(1, 9, 2))
    pred, _ = nn.forward(net, np.repeat(seq, 3, axis=0))
    assert pred[0].tobytes() == pred[1].tobytes() == pred[2].tobytes()


def test_forward_matches_scalar_oracle():
    net = perturbed_net((2, 3, 4), 7)
    x = np.random.default_rng(7).normal(size=(2, 6, 2))
    pred, _ = nn.forward(net, x)
    for s in range(2):
        np.testing.assert_allclose(pred[s], scalar_forward(net, x[s]), rtol=0, atol=1e-14)


def test_forward_shape_error():
    with pytest.raises(ValueError):
        nn.forward(zero_net(), np.zeros((1, 4, 3)))


def test_windowed_forward_equals_full_forward():
    net = perturbed_net((3, 4), 2)
    x = np.random.default_rng(2).normal(size=(2, 10, 2))
    full, _ = nn.forward(net, x)
    a, ca = nn.forward(net, x[:, :4])
    b, _ = nn.forward(net, x[:, 4:], ca.final_state)
    np.testing.assert_array_equal(np.concatenate([a, b], axis=1), full)


def test_non_finite_activation_reports_layer():
    net = zero_net((2, 2))
    net.lstm[1].b[:] = np.nan
    with pytest.raises(nn.NonFiniteError) as exc:
        nn.forward(net, np.zeros((1, 3, 2)))
    assert exc.value.layer == "LSTM2" and exc.value.time == 0


# --- loss --------------------------------------------------------------------


def test_mse_examples():
    assert nn.mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert nn.mse([1.0, 2.0], [0.0, 0.0]) == 2.5
    with pytest.raises(ValueError):
        nn.mse(np.zeros(3), np.zeros(4))


def test_mse_matches_naive_sum():
    rng = np.random.default_rng(9)
    p, y = rng.normal(size=(4, 50, 1)), rng.normal(size=(4, 50, 1))
    assert nn.mse(p, y) == pytest.approx(naive_mse(p, y), abs=1e-12)


# --- backward ----------------------------------------------------------------


def gradient_check(sizes, batch, T, seed, with_state=False):
    net = perturbed_net(sizes, seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, T, 2))
    y = rng.normal(size=(batch, T, 1))
    state = [(rng.normal(size=(batch, u)), rng.normal(size=(batch, u))) for u in sizes] if with_state else None
    _, cache = nn.forward(net, x, state)
    grads = nn.backward(net, cache, y)
    numeric = finite_difference_grads(lambda: nn.mse(nn.forward(net, x, state, keep_cache=False)[0], y),
                                      net.tensors())
    return max(relative_error(a, n) for a, n in zip(grads.tensors(), numeric))


@pytest.mark.parametrize("sizes, batch, T, seed", [((2, 3, 4), 2, 6, 0), ((4,), 1, 5, 1), ((3, 1), 2, 3, 2)])
def test_gradients_match_finite_differences(sizes, batch, T, seed):
    assert gradient_check(sizes, batch, T, seed) < 1e-6


def test_gradients_with_carried_state():
    assert gradient_check((2, 3), 2, 4, 5, with_state=True) < 1e-6


def test_gradient_zero_at_own_predictions():
    net = perturbed_net((3, 2), 3)
    x = np.random.default_rng(3).normal(size=(2, 5, 2))
    pred, cache = nn.forward(net, x)
    grads = nn.backward(net, cache, pred.copy())
    assert all(not g.any() for g in grads.tensors())


def test_duplicating_batch_leaves_gradients_unchanged():
    net = perturbed_net((3, 2), 6)
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(2, 5, 2)), rng.normal(size=(2, 5, 1))
    _, c1 = nn.forward(net, x)
    g1 = nn.backward(net, c1, y)
    _, c2 = nn.forward(net, np.concatenate([x, x]))
    g2 = nn.backward(net, c2, np.concatenate([y, y]))
    for a, b in zip(g1.tensors(), g2.tensors()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_batch_permutation_equivariance():
    net = perturbed_net((3, 2), 8)
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=(4, 5, 2)), rng.normal(size=(4, 5, 1))
    perm = np.array([2, 0, 3, 1])
    p1, c1 = nn.forward(net, x)
    p2, c2 = nn.forward(net, x[perm])
    np.testing.assert_array_equal(p2, p1[perm])
    assert nn.mse(p1, y) == pytest.approx(nn.mse(p2, y[perm]), abs=1e-12)
    for a, b in zip(nn.backward(net, c1, y).tensors(), nn.backward(net, c2, y[perm]).tensors()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_masked_backward_skips_frozen_and_matches_full():
    net = perturbed_net((3, 2, 2), 9)
    rng = np.random.default_rng(9)
    x, y = rng.normal(size=(2, 5, 2)), rng.normal(size=(2, 5, 1))
    _, cache = nn.forward(net, x)
    full = nn.backward(net, cache, y)
    part = nn.backward(net, cache, y, [False, False, True, True])
    for k in (0, 1):
        assert all(not t.any() for t in part.lstm[k].tensors())
    for a, b in zip(part.lstm[2].tensors() + part.dense.tensors(), full.lstm[2].tensors() + full.dense.tensors()):
        np.testing.assert_array_equal(a, b)


def test_stale_cache_rejected():
    net = perturbed_net((2,), 1)
    x, y = np.zeros((1, 3, 2)), np.zeros((1, 3, 1))
    _, cache = nn.forward(net, x)
    grads = nn.backward(net, cache, y)
    nn.adam_step(net, grads, nn.AdamState.fresh(net))
    with pytest.raises(nn.StaleCacheError):
        nn.backward(net, cache, y)
    with pytest.raises(nn.StaleCacheError):
        nn.backward(perturbed_net((2,), 1), nn.forward(net, x)[1], y)


# --- Adam --------------------------------------------------------------------


def scalar_net(value=0.0):
    net = nn.init_network((1,), 0)
    for arr in net.tensors():
        arr[...] = value
    return net


def test_adam_first_step_closed_form():
    net, grads = scalar_net(), scalar_net()
    grads.dense.b[0] = 1.0
    state = nn.AdamState.fresh(net, lr=0.01)
    nn.adam_step(net, grads, state)
    # m_hat = g, v_hat = g^2  ->  step = -lr * g / (|g| + eps)
    assert net.dense.b[0] == pytest.approx(-0.01 * 1.0 / (1.0 + 1e-8), abs=1e-18)
    assert state.t == 1


def test_adam_zero_gradient_no_change():
    net = perturbed_net((2, 3), 1)
    before = net.copy()
    nn.adam_step(net, net.zeros_like(), nn.AdamState.fresh(net))
    assert net.equals(before)


def test_adam_symmetric_updates():
    net, grads = scalar_net(), scalar_net()
    grads.dense.W[0, 0], grads.dense.b[0] = 0.37, -0.37
    nn.adam_step(net, grads, nn.AdamState.fresh(net))
    assert net.dense.W[0, 0] == -net.dense.b[0] != 0


def test_adam_mask_and_counter():
    net = perturbed_net((2, 2), 3)
    before = net.copy()
    grads = perturbed_net((2, 2), 4)
    state = nn.AdamState.fresh(net)
    for _ in range(3):
        nn.adam_step(net, grads, state, [False, True, False])
    assert state.t == 3
    assert net.lstm[0].W.tobytes() == before.lstm[0].W.tobytes()
    assert net.dense.b.tobytes() == before.dense.b.tobytes()
    assert not np.array_equal(net.lstm[1].W, before.lstm[1].W)


def test_adam_shape_mismatch():
    net = nn.init_network((2,), 0)
    with pytest.raises(ValueError):
        nn.adam_step(net, nn.init_network((3,), 0), nn.AdamState.fresh(net))


# --- init / checkpoints ---------------------------------------------------------


def test_init_deterministic():
    assert nn.init_network((3, 5), 11).equals(nn.init_network((3, 5), 11))
    assert not nn.init_network((3, 5), 11).equals(nn.init_network((3, 5), 12))


def test_parameter_count_full_architecture():
    net = nn.init_network((16, 64, 128), 0)
    expected = 0
    prev = 2
    for u in (16, 64, 128):
        expected += 4 * (u * prev + u * u + u)
        prev = u
    expected += 128 + 1
    assert net.n_params() == expected == nn.parameter_count((16, 64, 128))
    assert net.layer_names == ["LSTM1", "LSTM2", "LSTM3", "Dense"]


def test_glorot_bounds_and_biases():
    net = nn.init_network((16, 64, 128), 3)
    prev = 2
    for p in net.lstm:
        u = p.units
        assert np.abs(p.W).max() <= np.sqrt(6 / (prev + u))
        assert np.abs(p.U).max() <= np.sqrt(6 / (2 * u))
        np.testing.assert_array_equal(p.b[u:2 * u], 1.0)
        assert not p.b[:u].any() and not p.b[2 * u:].any()
        prev = u
    assert np.abs(net.dense.W).max() <= np.sqrt(6 / (128 + 1))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for k in range(4):
        sizes = tuple(int(v) for v in rng.integers(1, 6, size=rng.integers(1, 4)))
        net = perturbed_net(sizes, k)
        nn.save_checkpoint(net, tmp_path / "m.sidm", seed=k)
        loaded, header = nn.load_checkpoint(tmp_path / "m.sidm")
        assert loaded.equals(net) and header["seed"] == k and tuple(header["sizes"]) == sizes


def test_checkpoint_corruption(tmp_path):
    net = perturbed_net((2,), 0)
    path = tmp_path / "m.sidm"
    nn.save_checkpoint(net, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path)
