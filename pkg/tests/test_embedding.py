import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_diff, rel_error
from smartmine.embedding import (LayerSpec, ParamGrads, backward, default_specs, forward,
                                 forward_batch, init_params, load_checkpoint, save_checkpoint,
                                 sgd_step)
from smartmine.errors import ConfigError, DegenerateNormError, NumericError, ParseError


def small_net(seed=0, normalise_hidden=False):
    return init_params(default_specs(5, 7, 4, normalise_hidden), seed)


def test_init_is_deterministic():
    specs = [LayerSpec(4, 3, has_activation=True), LayerSpec(3, 2, has_normalisation=True)]
    assert init_params(specs, 7).equals(init_params(specs, 7))
    assert not init_params(specs, 7).equals(init_params(specs, 8))


def test_width_mismatch_rejected():
    with pytest.raises(ConfigError):
        init_params([LayerSpec(4, 3), LayerSpec(5, 2, has_normalisation=True)], 0)


def test_final_layer_must_normalise_without_relu():
    with pytest.raises(ConfigError):
        init_params([LayerSpec(4, 3)], 0)
    with pytest.raises(ConfigError):
        init_params([LayerSpec(4, 3, has_activation=True, has_normalisation=True)], 0)


def test_biases_start_at_zero_and_weights_within_glorot_limit():
    p = init_params([LayerSpec(64, 64, has_normalisation=True)], 0)
    assert np.all(p.biases[0] == 0.0)
    assert np.abs(p.weights[0]).max() <= np.sqrt(6 / 128)


def test_identity_layer_normalises_3_4():
    p = init_params([LayerSpec(2, 2, has_normalisation=True)], 0)
    p.weights[0] = np.eye(2)
    y, _ = forward(p, [3.0, 4.0])
    np.testing.assert_allclose(y, [0.6, 0.8], atol=1e-15)


def test_nan_input_is_numeric_error():
    with pytest.raises(NumericError):
        forward(small_net(), [1, 2, np.nan, 0, 0])


@pytest.mark.parametrize("x", [[0.0, 0.0], [1e-14, 0.0]])
def test_zero_or_tiny_vector_into_norm_layer(x):
    p = init_params([LayerSpec(2, 2, has_normalisation=True)], 0)
    p.weights[0] = np.eye(2)
    with pytest.raises(DegenerateNormError):
        forward(p, x)


@given(arrays(np.float64, (6, 5), elements=st.floats(-10, 10)))
def test_outputs_are_unit_norm(X):
    p = small_net(3, normalise_hidden=True)
    try:
        E = forward_batch(p, X)
    except DegenerateNormError:
        return
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-9)


def test_batch_matches_singletons_and_permutation(rng):
    p = small_net(1)
    X = rng.normal(size=(9, 5))
    E = forward_batch(p, X)
    for i in range(9):
        np.testing.assert_allclose(forward_batch(p, X[i:i + 1])[0], E[i], rtol=0, atol=1e-15)
        np.testing.assert_allclose(forward(p, X[i])[0], E[i], rtol=0, atol=1e-15)
    perm = rng.permutation(9)
    np.testing.assert_allclose(forward_batch(p, X[perm]), E[perm], atol=1e-15)
    np.testing.assert_array_equal(forward_batch(p, X), E)


@pytest.mark.parametrize("normalise_hidden", [False, True])
def test_backward_matches_finite_differences(normalise_hidden):
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(25):
        p = small_net(trial, normalise_hidden)
        p.biases = [rng.normal(scale=0.3, size=b.shape) for b in p.biases]
        x = rng.normal(size=(3, 5))
        up = rng.normal(size=(3, 4))
        _, tape = forward(p, x)
        grads, gx = backward(p, tape, up)

        def loss_w(w, layer):
            q = p.copy()
            q.weights[layer] = w
            return float(np.sum(forward(q, x)[0] * up))

        def loss_b(b, layer):
            q = p.copy()
            q.biases[layer] = b
            return float(np.sum(forward(q, x)[0] * up))

        for layer in range(2):
            worst = max(worst, rel_error(grads.weights[layer],
                                         central_diff(lambda w: loss_w(w, layer), p.weights[layer])))
            worst = max(worst, rel_error(grads.biases[layer],
                                         central_diff(lambda b: loss_b(b, layer), p.biases[layer])))
        worst = max(worst, rel_error(gx, central_diff(lambda z: float(np.sum(forward(p, z)[0] * up)), x)))
    assert worst < 1e-5


def test_zero_upstream_gradient_gives_zero_gradients(rng):
    p = small_net()
    _, tape = forward(p, rng.normal(size=(4, 5)))
    grads, gx = backward(p, tape, np.zeros((4, 4)))
    assert all(np.all(g == 0) for g in grads.weights + grads.biases)
    assert np.all(gx == 0)


def test_normalisation_annihilates_parallel_component(rng):
    p = init_params([LayerSpec(3, 3, has_normalisation=True)], 0)
    p.weights[0] = np.eye(3)
    x = rng.normal(size=3)
    y, tape = forward(p, x)
    _, gx = backward(p, tape, 2.5 * y)
    np.testing.assert_allclose(gx, 0.0, atol=1e-14)


def test_sgd_hand_value():
    p = init_params([LayerSpec(1, 1, has_normalisation=True)], 0)
    p.weights[0][:] = 1.0
    zero = ParamGrads([np.zeros((1, 1))], [np.zeros(1)])
    q = sgd_step(p, zero, 0.1, 0.0005)
    assert q.weights[0][0, 0] == pytest.approx(0.99995, abs=1e-15)


def test_sgd_fixed_points(rng):
    p = small_net()
    g = ParamGrads([rng.normal(size=w.shape) for w in p.weights],
                   [rng.normal(size=b.shape) for b in p.biases])
    assert sgd_step(p, g, 0.0, 0.1).equals(p)
    zero = ParamGrads([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])
    assert sgd_step(p, zero, 0.3, 0.0).equals(p)


def test_biases_are_not_decayed():
    p = small_net()
    p.biases[0][:] = 1.0
    zero = ParamGrads([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])
    q = sgd_step(p, zero, 0.5, 0.1)
    assert np.all(q.biases[0] == 1.0)


def test_checkpoint_round_trip(tmp_path):
    p = small_net(4, normalise_hidden=True)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.specs == p.specs
    for a, b in zip(p.weights + p.biases, q.weights + q.biases):
        np.testing.assert_array_equal(b, a.astype(np.float32).astype(np.float64))
    save_checkpoint(q, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_truncation_reports_offset(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_net(), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ParseError, match="byte offset"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ParseError):
        load_checkpoint(path)
