import json

import numpy as np
import pytest

from neurogen import network as nw
from tests.conftest import finite_difference_grads, random_problem, relative_error


def test_init_shapes_and_bound():
    net = nw.init_network([64, 4, 4, 2], [512, 512], seed=0)
    assert [W.shape for W in net.weights] == [(4, 65), (4, 5), (2, 5)]
    assert np.abs(net.W(1)).max() <= np.sqrt(6 / (65 + 4))
    assert all(np.all(W[:, -1] == 0) for W in net.weights)


def test_init_deterministic_per_seed():
    a = nw.init_network([5, 4, 3, 2], seed=7)
    b = nw.init_network([5, 4, 3, 2], seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


@pytest.mark.parametrize("widths", [[5, 0, 2], [5, 2]])
def test_init_rejects_bad_widths(widths):
    with pytest.raises(ValueError):
        nw.init_network(widths)


def test_init_rejects_width_above_cap():
    with pytest.raises(nw.CapacityError):
        nw.init_network([3, 8, 2], [4])


def test_modified_relu_values():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(nw.modified_relu(x), [0, 0, 2])
    np.testing.assert_array_equal(nw.modified_relu_grad(x), [0, 1, 1])


def test_forward_hand_computed():
    net = nw.DenseNet([np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])], [1])
    assert nw.forward(net, np.array([[2.0]])).logits[0, 0] == 2.0


def test_forward_zero_weights_and_batching(rng):
    net, X, _ = random_problem(rng, [5, 4, 3, 2])
    zero = nw.DenseNet([np.zeros_like(W) for W in net.weights], net.max_widths)
    assert np.all(nw.forward(zero, X).logits == 0)
    batched = nw.forward(net, X).logits
    single = np.hstack([nw.forward(net, X[:, [i]]).logits for i in range(X.shape[1])])
    np.testing.assert_allclose(batched, single, rtol=1e-14, atol=1e-14)
    with pytest.raises(nw.ShapeError):
        nw.forward(net, X[:4])


def test_backward_matches_finite_differences(rng):
    net, X, y = random_problem(rng, [5, 4, 3, 2], n=30)
    _, grads = nw.loss_and_grads(net, X, y)
    for analytic, numeric in zip(grads.dW, finite_difference_grads(net, X, y)):
        assert relative_error(analytic, numeric) <= 1e-5


def test_bias_gradient_is_row_mean_of_dz(rng):
    net, X, y = random_problem(rng, [5, 4, 3, 2])
    _, grads = nw.loss_and_grads(net, X, y)
    for l in range(1, 4):
        # dZ is already divided by n, so the row sum is the per-sample mean
        np.testing.assert_allclose(grads.dW[l - 1][:, -1], grads.dZ[l].sum(axis=1), atol=1e-15)


def test_saturated_prediction_has_tiny_gradient():
    net = nw.DenseNet([np.array([[1.0, 0.0]]), np.array([[50.0, 0.0], [-50.0, 0.0]])], [1])
    _, grads = nw.loss_and_grads(net, np.array([[1.0]]), np.array([0]))
    assert max(np.abs(g).max() for g in grads.dW) < 1e-30


def test_backward_rejects_bad_labels(rng):
    net, X, y = random_problem(rng, [5, 4, 3, 2])
    with pytest.raises(ValueError):
        nw.loss_and_grads(net, X, np.full(y.size, 2))


def test_adam_single_step_by_hand():
    net = nw.DenseNet([np.zeros((1, 2)), np.zeros((1, 2))], [1])
    state = nw.AdamState.for_net(net, lr=0.1)
    grads = [np.array([[1.0, 0.0]]), np.zeros((1, 2))]
    nw.adam_step(net, state, grads)
    assert state.t == 1
    assert net.W(1)[0, 0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert net.W(1)[0, 1] == 0.0 and np.all(net.W(2) == 0)


def test_adam_zero_gradient_and_symmetry():
    net = nw.DenseNet([np.ones((2, 2)), np.ones((1, 3))], [2])
    state = nw.AdamState.for_net(net)
    before = [W.copy() for W in net.weights]
    nw.adam_step(net, state, [np.zeros((2, 2)), np.zeros((1, 3))])
    assert state.t == 1 and all(np.array_equal(a, b) for a, b in zip(before, net.weights))
    g = np.array([[0.3, 0.3], [0.3, 0.3]])
    for _ in range(3):
        nw.adam_step(net, state, [g, np.zeros((1, 3))])
    assert np.all(net.W(1) == net.W(1)[0, 0])
    with pytest.raises(nw.ShapeError):
        nw.adam_step(net, state, [np.zeros((3, 2)), np.zeros((1, 3))])


def test_grow_layer_appends_and_preserves(rng):
    net, X, y = random_problem(rng, [5, 4, 3, 2])
    state = nw.AdamState.for_net(net)
    _, grads = nw.loss_and_grads(net, X, y)
    nw.adam_step(net, state, grads)
    old = net.copy()
    old_m = [m.copy() for m in state.m]
    before = nw.forward(net, X).logits
    fan_in = rng.standard_normal((2, 6))
    nw.grow_layer(net, state, 1, fan_in, np.zeros((3, 2)))
    assert net.widths == [5, 6, 3, 2]
    np.testing.assert_array_equal(net.W(1)[:4], old.W(1))
    np.testing.assert_array_equal(net.W(1)[4:], fan_in)
    np.testing.assert_array_equal(net.W(2)[:, :4], old.W(2)[:, :4])
    np.testing.assert_array_equal(net.W(2)[:, -1], old.W(2)[:, -1])
    np.testing.assert_array_equal(state.m[0][:4], old_m[0])
    assert np.all(state.m[0][4:] == 0) and np.all(state.v[1][:, 4:6] == 0)
    assert np.abs(nw.forward(net, X).logits - before).max() <= 1e-10
    net.check()


def test_grow_zero_fan_in_preserves_and_gets_gradient(rng):
    net, X, y = random_problem(rng, [5, 4, 3, 2])
    before = nw.forward(net, X).logits
    nw.grow_layer(net, None, 2, np.zeros((1, 5)), rng.standard_normal((2, 1)))
    assert np.abs(nw.forward(net, X).logits - before).max() <= 1e-10
    _, grads = nw.loss_and_grads(net, X, y)
    assert np.linalg.norm(grads.dW[1][-1]) > 0


def test_grow_errors_and_noop(rng):
    net, _, _ = random_problem(rng, [5, 4, 3, 2], max_widths=[5, 3])
    snapshot = net.copy()
    nw.grow_layer(net, None, 1, np.zeros((0, 6)), np.zeros((3, 0)))
    assert all(np.array_equal(a, b) for a, b in zip(snapshot.weights, net.weights))
    with pytest.raises(nw.CapacityError):
        nw.grow_layer(net, None, 1, np.zeros((2, 6)), np.zeros((3, 2)))
    with pytest.raises(nw.ShapeError):
        nw.grow_layer(net, None, 1, np.zeros((1, 5)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        nw.grow_layer(net, None, 3, np.zeros((1, 4)), np.zeros((2, 1)))


def test_rescale_to_layer_norm():
    net = nw.DenseNet([np.array([[2.0, 0.0], [0.0, 2.0]]), np.ones((1, 3))], [4])
    np.testing.assert_allclose(nw.rescale_to_layer_norm(net, 1, [1.0, 0.0]), [2.0, 0.0])
    np.testing.assert_array_equal(nw.rescale_to_layer_norm(net, 1, [0.0, 0.0]), [0.0, 0.0])
    rng = np.random.default_rng(0)
    net = nw.init_network([7, 5, 2], seed=1)
    w = nw.rescale_to_layer_norm(net, 1, rng.standard_normal(8))
    assert abs(np.linalg.norm(w) - nw.mean_row_norm(net, 1)) <= 1e-12


def test_checkpoint_round_trip(tmp_path, rng):
    net, X, y = random_problem(rng, [5, 4, 3, 2])
    state = nw.AdamState.for_net(net)
    nw.adam_step(net, state, nw.loss_and_grads(net, X, y)[1])
    gen = np.random.Generator(np.random.PCG64(3))
    gen.standard_normal(5)
    path = tmp_path / "ck.json"
    nw.save_checkpoint(path, net, state, gen)
    doc = json.loads(path.read_text())
    assert doc["widths"] == [5, 4, 3, 2]
    net2, state2, gen2 = nw.load_checkpoint(path)
    assert all(np.array_equal(a, b) for a, b in zip(net.weights, net2.weights))
    assert state2.t == 1 and all(np.array_equal(a, b) for a, b in zip(state.v, state2.v))
    assert gen2.standard_normal() == gen.standard_normal()


def test_gradients_stay_correct_after_growth_and_training(rng):
    net, X, y = random_problem(rng, [5, 4, 3, 2], n=25)
    state = nw.AdamState.for_net(net, lr=1e-2)
    for step in range(4):
        nw.adam_step(net, state, nw.loss_and_grads(net, X, y)[1])
        l = 1 + step % 2
        fan_in = rng.standard_normal((1, net.W(l).shape[1]))
        nw.grow_layer(net, state, l, fan_in, rng.standard_normal((net.W(l + 1).shape[0], 1)) * 0.1)
    _, grads = nw.loss_and_grads(net, X, y)
    for analytic, numeric in zip(grads.dW, finite_difference_grads(net, X, y)):
        assert relative_error(analytic, numeric) <= 1e-5
