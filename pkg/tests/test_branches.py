"""Branch encoder tests: one interface, four realizations."""

import numpy as np
import numpy.testing as npt
import pytest

from stone import autodiff as ad
from stone.branches import BRANCH_KINDS, BranchConfig, build_branch
from stone.errors import ConfigError, DimensionError


def _build(kind, n_sensors=3, k_hist=5, q=8, depth=2, heads=2, seed=0):
    cfg = BranchConfig(kind=kind, n_sensors=n_sensors, k_hist=k_hist, q=q,
                       depth=depth, heads=heads)
    store = ad.ParamStore()
    encoder = build_branch(cfg, store, np.random.default_rng(seed))
    return encoder, store


def _window(batch=2, k_hist=5, n_sensors=3, seed=1):
    return np.random.default_rng(seed).normal(size=(batch, k_hist, n_sensors))


@pytest.mark.parametrize("kind", BRANCH_KINDS)
def test_output_shape(kind):
    encoder, _ = _build(kind)
    out = encoder.encode(ad.Node(_window()))
    assert out.shape == (2, 8)


@pytest.mark.parametrize("kind", BRANCH_KINDS)
def test_wrong_window_shape_rejected(kind):
    encoder, _ = _build(kind)
    with pytest.raises(DimensionError):
        encoder.encode(ad.Node(np.zeros((2, 4, 3))))  # k_hist is 5
    with pytest.raises(DimensionError):
        encoder.encode(ad.Node(np.zeros((2, 5, 2))))  # n_sensors is 3


@pytest.mark.parametrize("kind", BRANCH_KINDS)
def test_batch_rows_independent(kind):
    encoder, _ = _build(kind)
    u = _window(batch=4, seed=2)
    batched = encoder.encode(ad.Node(u)).value
    for row in range(4):
        single = encoder.encode(ad.Node(u[row:row + 1])).value
        npt.assert_allclose(single[0], batched[row], atol=1e-12)


@pytest.mark.parametrize("kind", BRANCH_KINDS)
def test_deterministic_given_seed(kind):
    a, _ = _build(kind, seed=7)
    b, _ = _build(kind, seed=7)
    u = _window(seed=3)
    assert a.encode(ad.Node(u)).value.tobytes() == b.encode(ad.Node(u)).value.tobytes()


def test_fcn_zero_params_give_zero(self=None):
    encoder, store = _build("fcn")
    for node in store.nodes():
        node.value = np.zeros_like(node.value)
    out = encoder.encode(ad.Node(_window()))
    npt.assert_array_equal(out.value, np.zeros((2, 8)))


def test_fcn_sensitive_to_time_permutation():
    encoder, _ = _build("fcn", seed=11)
    u = _window(seed=4)
    flipped = u[:, ::-1, :].copy()
    a = encoder.encode(ad.Node(u)).value
    b = encoder.encode(ad.Node(flipped)).value
    assert not np.allclose(a, b)


@pytest.mark.parametrize("kind", ["gru", "lstm", "transformer"])
def test_time_reversal_changes_output(kind):
    encoder, _ = _build(kind, seed=13)
    u = _window(seed=5)
    flipped = u[:, ::-1, :].copy()
    a = encoder.encode(ad.Node(u)).value
    b = encoder.encode(ad.Node(flipped)).value
    assert not np.allclose(a, b)


def test_gru_zero_params_encode_bias_only():
    # zero parameters keep every hidden state at zero; the projection
    # then emits its (zero) bias regardless of the input
    encoder, store = _build("gru")
    for node in store.nodes():
        node.value = np.zeros_like(node.value)
    out = encoder.encode(ad.Node(_window(seed=6)))
    npt.assert_array_equal(out.value, np.zeros((2, 8)))


def test_recurrent_depth_one_matches_manual_rollout():
    encoder, store = _build("gru", depth=1, q=4, n_sensors=2, k_hist=3, seed=17)
    u = _window(batch=1, k_hist=3, n_sensors=2, seed=7)
    cell = encoder.cells[0]
    h = ad.Node(np.zeros((1, 4)))
    for t in range(3):
        h = cell.step(ad.Node(u[:, t, :]), h)
    expected = encoder.out.forward(h).value
    npt.assert_allclose(encoder.encode(ad.Node(u)).value, expected, atol=1e-15)


def test_transformer_uses_positions():
    # constant-in-time input would be position-blind without the
    # encoding; with it, shuffling time steps leaves output unchanged
    # only when the steps are identical
    encoder, _ = _build("transformer", seed=19)
    base = np.random.default_rng(8).normal(size=(1, 1, 3))
    constant = np.repeat(base, 5, axis=1)
    out1 = encoder.encode(ad.Node(constant)).value
    out2 = encoder.encode(ad.Node(constant)).value
    npt.assert_array_equal(out1, out2)
    varying = constant.copy()
    varying[0, 2, :] += 1.0
    assert not np.allclose(encoder.encode(ad.Node(varying)).value, out1)


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        BranchConfig("cnn", 3, 5).validate()


def test_heads_must_divide_q():
    with pytest.raises(ConfigError):
        BranchConfig("transformer", 3, 5, q=6, heads=4).validate()


def test_nonpositive_dims_rejected():
    with pytest.raises(ConfigError):
        BranchConfig("fcn", 0, 5).validate()
    with pytest.raises(ConfigError):
        BranchConfig("fcn", 3, 5, depth=0).validate()


@pytest.mark.parametrize("kind", BRANCH_KINDS)
def test_gradients_flow_to_all_branch_params(kind):
    encoder, store = _build(kind, n_sensors=2, k_hist=3, q=4, depth=1, heads=2)
    u = _window(batch=2, k_hist=3, n_sensors=2, seed=9)
    store.zero_grad()
    ad.backward(ad.mean_all(encoder.encode(ad.Node(u))))
    grads = store.grads()
    touched = [name for name, g in grads.items() if np.any(g != 0)]
    # every weight matrix participates (biases of dead relu units can
    # legitimately sit at zero gradient)
    weight_names = [n for n in store.names() if ".W" in n or "scale" in n]
    for name in weight_names:
        assert name in touched, f"no gradient reached {name}"
