import math

import numpy as np
import pytest

from neurogen import initializers as ini
from neurogen import metrics as mt
from neurogen import network as nw
from neurogen import triggers as tg

ED = mt.MetricKind()
OG = mt.MetricKind("orthogonality_gap")


def setup(seed=0, widths=(10, 8, 6, 3), caps=(40, 40), n=200, buffer=150):
    rng = np.random.default_rng(seed)
    net = nw.init_network(list(widths), list(caps), seed=seed)
    X = rng.standard_normal((widths[0], n))
    y = rng.integers(0, widths[-1], n)
    trace, grads = nw.loss_and_grads(net, X, y)
    buf = mt.ActivationBuffer.for_net(net, buffer)
    buf.push(trace)
    return net, X, y, trace, grads, buf, rng


def grown(net, l, new, state=None):
    out = net.copy()
    ini.apply_growth(out, state, l, new)
    return out


def brute_scores(H, C, eps=0.01):
    """Per-candidate (effective dimension, singular-value sum) by direct SVD of the stacked matrix."""
    n = H.shape[1]
    out = []
    for c in C:
        s = np.linalg.svd(np.vstack([H, c]) / np.sqrt(n), compute_uv=False)
        out.append((np.count_nonzero(s > eps) / (H.shape[0] + 1), s.sum()))
    return out


def test_random_preserves_function_and_norms():
    net, X, _, _, _, _, rng = setup()
    new = ini.init_random(net, 1, 3, rng)
    assert new.fan_in.shape == (3, 11) and new.fan_out.shape == (6, 3)
    np.testing.assert_allclose(np.linalg.norm(new.fan_in, axis=1), nw.mean_row_norm(net, 1), rtol=0, atol=1e-12)
    after = grown(net, 1, new)
    assert after.widths == [10, 11, 6, 3]
    assert np.abs(nw.forward(after, X).logits - nw.forward(net, X).logits).max() <= 1e-10
    assert ini.init_random(net, 1, 0, rng).k == 0


def test_select_prefers_orthogonal_over_duplicate():
    n = 12
    X = np.zeros((4, n))
    for i in range(4):
        X[i, 3 * i:3 * i + 3] = 1.0 + np.arange(3)
    net = nw.DenseNet([np.hstack([np.eye(4)[:2], np.zeros((2, 1))]), np.zeros((2, 3))], [4])
    H_l = nw.forward(net, X).H[1]
    dup = np.array([1.0, 0, 0, 0, 0])
    orth = np.array([0, 0, 1.0, 0, 0])
    pool = ini.CandidatePool(np.vstack([dup, orth]), ["random", "random"])
    new = ini.select_from_pool(net, 1, 1, pool, X, H_l, ED)
    np.testing.assert_allclose(new.fan_in[0], orth)
    new_og = ini.select_from_pool(net, 1, 1, pool, X, H_l, OG)
    np.testing.assert_allclose(new_og.fan_in[0], orth)


def test_select_effective_dimension_matches_brute_force():
    net, X, _, _, _, buf, rng = setup(1)
    H_prev, _, H_l = buf.aligned(1)
    rows = nw.rescale_to_norm(ini.base_fan_in(net, 1, 60, rng), nw.mean_row_norm(net, 1))
    C = ini.candidate_activations(rows, H_prev)
    primary, secondary = ini.score_effective_dimension(H_l, C, 0.01)
    oracle = brute_scores(H_l, C)
    np.testing.assert_array_equal(primary, [o[0] for o in oracle])
    np.testing.assert_allclose(secondary, [o[1] for o in oracle], rtol=1e-10)
    pool = ini.CandidatePool(rows, ["random"] * 60)
    new = ini.select_from_pool(net, 1, 4, pool, H_prev, H_l, ED)
    ranked = sorted(range(60), key=lambda i: (-oracle[i][0], -oracle[i][1], i))
    np.testing.assert_allclose(new.fan_in, rows[ranked[:4]])


def test_select_skips_sums_for_hopeless_candidates():
    rng = np.random.default_rng(0)
    H = rng.standard_normal((3, 20))
    C = np.vstack([H[0], rng.standard_normal((2, 20))])
    primary, secondary = ini.score_effective_dimension(H, C, 0.01, k=1)
    assert primary[0] < primary[1] and secondary[0] == -np.inf and np.isfinite(secondary[1])


def test_orthogonality_gap_scoring_matches_direct():
    rng = np.random.default_rng(2)
    H = np.abs(rng.standard_normal((5, 30)))
    C = np.abs(rng.standard_normal((20, 30)))
    primary, _ = ini.score_candidates(H, C, OG)
    direct = [mt.orthogonality_gap(np.vstack([H, c])) for c in C]
    np.testing.assert_allclose(primary, direct, atol=1e-12)


def test_select_never_below_best_candidate():
    net, X, _, _, _, buf, rng = setup(3)
    H_prev, _, H_l = buf.aligned(1)
    before = mt.effective_dimension(H_l)
    new = ini.init_select(net, buf, 1, 2, np.random.default_rng(9), ED, candidates=40)
    pool = ini.base_fan_in(net, 1, 42, np.random.default_rng(9))
    pool = nw.rescale_to_norm(pool, nw.mean_row_norm(net, 1))
    best = max(mt.effective_dimension(np.vstack([H_l, c]))
               for c in ini.candidate_activations(pool, H_prev))
    chosen = mt.effective_dimension(np.vstack([H_l, ini.candidate_activations(new.fan_in[:1], H_prev)]))
    assert chosen >= best - 1e-12
    if best >= before:
        assert chosen >= before
    after = grown(net, 1, new)
    assert np.abs(nw.forward(after, X).logits - nw.forward(net, X).logits).max() <= 1e-10


def test_select_requires_full_buffer():
    net, _, _, _, _, buf, rng = setup()
    buf.invalidate(1, net.widths)
    with pytest.raises(ValueError):
        ini.init_select(net, buf, 1, 1, rng, ED, candidates=5)
    assert ini.init_select(net, buf, 1, 0, rng, ED).k == 0


def test_preactivation_candidates_orthogonal_to_existing_preactivations():
    net, X, _, _, _, buf, rng = setup(4, widths=(30, 8, 6, 3), n=25, buffer=25)
    H_prev, Z_l, _ = buf.aligned(1)
    pool = ini.preactivation_pool(net, H_prev, Z_l, 10, rng)
    H_aug = np.vstack([H_prev, np.ones((1, H_prev.shape[1]))])
    for w in pool.fan_in:
        z_new = w @ H_aug
        for z in Z_l:
            assert abs(z_new @ z) <= 1e-6 * np.linalg.norm(z_new) * np.linalg.norm(z)


def test_preactivation_orthonormal_buffer_closed_form():
    n, m0 = 12, 4
    # orthonormal buffer rows that are also orthogonal to the bias row of ones
    raw = np.column_stack([np.ones(n), np.random.default_rng(5).standard_normal((n, m0))])
    basis, _ = np.linalg.qr(raw)
    H_prev = basis[:, 1:].T
    H_aug = np.vstack([H_prev, np.ones((1, n))])
    net = nw.DenseNet([np.random.default_rng(6).standard_normal((3, m0 + 1)), np.zeros((2, 4))], [10])
    Z = net.W(1) @ H_aug
    pool = ini.preactivation_pool(net, H_prev, Z, 3, np.random.default_rng(7))
    V_kernel = np.linalg.svd(Z)[2].T[:, 3:]
    a = np.random.default_rng(7).standard_normal((n - 3, 3))
    expected = (np.linalg.pinv(H_aug.T) @ V_kernel @ a).T
    np.testing.assert_allclose(pool.fan_in, expected, atol=1e-10)
    # pre-activations land in the kernel part of the row space of H_aug
    np.testing.assert_allclose(pool.fan_in @ H_aug @ Z.T, 0, atol=1e-10)


def test_preactivation_needs_more_samples_than_neurons():
    net, _, _, _, _, _, rng = setup()
    with pytest.raises(ini.GrowthImpossible):
        ini.preactivation_pool(net, np.ones((10, 8)), np.ones((8, 8)), 3, rng)


def test_weight_projection_cases():
    rng = np.random.default_rng(0)
    W = np.zeros((2, 5))
    W[0, 0], W[1, 1] = 1.0, 1.0
    net = nw.DenseNet([W, np.zeros((2, 3))], [5])
    new = ini.init_weight(net, 1, 2, rng)
    np.testing.assert_allclose(new.fan_in[:, :2], 0, atol=1e-14)
    net, X, _, _, _, _, rng = setup(5)
    new = ini.init_weight(net, 1, 3, rng)
    for w in new.fan_in:
        for row in net.W(1):
            assert abs(w @ row) <= 1e-8 * np.linalg.norm(w) * np.linalg.norm(row)
    after = grown(net, 1, new)
    assert np.abs(nw.forward(after, X).logits - nw.forward(net, X).logits).max() <= 1e-10
    square = nw.DenseNet([np.eye(3), np.zeros((2, 4))], [6])
    with pytest.raises(ini.GrowthImpossible):
        ini.init_weight(square, 1, 1, rng)


def test_weight_clamps_to_kernel_dimension():
    rng = np.random.default_rng(1)
    net = nw.DenseNet([rng.standard_normal((3, 5)), np.zeros((2, 4))], [10])
    assert ini.init_weight(net, 1, 5, rng).k == 2


def test_gradmax_singular_value_property():
    net, X, y, trace, grads, _, _ = setup(6)
    new = ini.init_gradmax(net, trace, grads, 1, 3)
    assert np.all(new.fan_in == 0)
    after = grown(net, 1, new)
    assert np.abs(nw.forward(after, X).logits - nw.forward(net, X).logits).max() <= 1e-10
    _, g2 = nw.loss_and_grads(after, X, y)
    S = np.linalg.svd(tg.auxiliary_gradient(trace, grads, 1), compute_uv=False)
    scale = nw.mean_fan_out_norm(net, 1)
    norms = np.linalg.norm(g2.dW[0][-3:], axis=1)
    np.testing.assert_allclose(norms, scale * S[:3], rtol=1e-4)
    with pytest.raises(ValueError):
        ini.init_gradmax(net, trace, grads, 1, 7)


def candidate_backprop_norm(net, X, y, l, fan_in, fan_out, parent=None, parent_in=None, parent_out=None):
    trial = net.copy()
    if parent is not None:
        nw.set_neurons(trial, l, [parent], parent_in[None], parent_out[:, None])
    nw.grow_layer(trial, None, l, fan_in[None], fan_out[:, None])
    _, g = nw.loss_and_grads(trial, X, y)
    return math.hypot(np.linalg.norm(g.dW[l - 1][-1]), np.linalg.norm(g.dW[l][:, -2]))


def test_firefly_ranking_matches_backprop_oracle():
    net, X, y, trace, grads, _, _ = setup(7)
    pool = ini.firefly_pool(net, 1, 16, np.random.default_rng(3))
    fast = ini.candidate_gradient_norms(trace, grads, 1, pool.fan_in, pool.fan_out)
    oracle = []
    for j in range(16):
        if j < pool.n_split:
            p = pool.parents[j]
            oracle.append(candidate_backprop_norm(net, X, y, 1, pool.fan_in[j], pool.fan_out[:, j], p,
                                                  net.W(1)[p] - pool.delta[j], 0.5 * net.W(2)[:, p]))
        else:
            oracle.append(candidate_backprop_norm(net, X, y, 1, pool.fan_in[j], pool.fan_out[:, j]))
    oracle = np.array(oracle)
    np.testing.assert_allclose(fast, oracle, rtol=1e-3)
    assert list(np.argsort(-fast)[:4]) == list(np.argsort(-oracle)[:4])


def test_firefly_split_preserves_function_when_noise_is_zero():
    net, X, _, trace, grads, _, rng = setup(8)
    pool = ini.firefly_pool(net, 1, 16, rng, eps_firefly=0.0)
    p = pool.parents[0]
    new = ini.NewNeurons(pool.fan_in[:1], pool.fan_out[:, :1], ["split"], np.array([p]),
                         net.W(1)[[p]], 0.5 * net.W(2)[:, [p]])
    after = grown(net, 1, new)
    assert np.abs(nw.forward(after, X).logits - nw.forward(net, X).logits).max() <= 1e-12


def test_firefly_small_noise_small_deviation():
    net, X, _, trace, grads, _, rng = setup(9)
    new = ini.init_firefly(net, trace, grads, 1, 4, rng, 1e-4, candidates=30)
    after = grown(net, 1, new)
    before = nw.forward(net, X).logits
    dev = np.linalg.norm(nw.forward(after, X).logits - before) / np.linalg.norm(before)
    assert dev <= 1e-2
    assert new.parent_idx.size == sum(p.startswith("split") for p in new.provenance)


def test_nest_zero_gradient_gives_zero_neuron():
    net, X, _, trace, grads, _, rng = setup(10)
    zero = nw.Gradients(grads.dW, [None if d is None else np.zeros_like(d) for d in grads.dZ], 0.0)
    new = ini.init_nest(net, trace, zero, 1, 2, rng)
    assert not new.fan_in.any() and not new.fan_out.any()
    after = grown(net, 1, new)
    assert np.abs(nw.forward(after, X).logits - nw.forward(net, X).logits).max() == 0


def test_nest_single_dominant_entry():
    net = nw.init_network([4, 3, 3], [6], seed=0)
    H0 = np.zeros((4, 1))
    H0[0, 0] = 1.0
    trace = nw.ForwardTrace([None, None, None], [H0, np.zeros((3, 1)), np.zeros((3, 1))])
    dZ2 = np.zeros((3, 1))
    dZ2[0, 0] = 5.0
    grads = nw.Gradients(None, [None, None, dZ2], 0.0)
    new = ini.init_nest(net, trace, grads, 1, 1, np.random.default_rng(0), rescale=False)
    assert np.flatnonzero(new.fan_in[0]).tolist() == [0]
    assert np.flatnonzero(new.fan_out[:, 0]).tolist() == [0]
    assert abs(new.fan_in[0, 0]) == 5.0 and abs(new.fan_out[0, 0]) == 5.0


def test_nest_support_within_quantile():
    net, _, _, trace, grads, _, rng = setup(11)
    G = tg.auxiliary_gradient(trace, grads, 1, bias=False)
    new = ini.init_nest(net, trace, grads, 1, 3, rng, rescale=False)
    support = np.abs(G) >= np.quantile(np.abs(G), 0.6)
    assert support.sum() <= math.ceil(0.4 * G.size) + 1
    np.testing.assert_allclose(np.abs(new.fan_in[0, :-1]), np.sqrt((G**2 * support).sum(axis=0)))
    np.testing.assert_allclose(np.abs(new.fan_out[:, 0]), np.sqrt((G**2 * support).sum(axis=1)))
    assert np.all(new.fan_in[:, -1] == 0)
    scaled = ini.init_nest(net, trace, grads, 1, 3, rng)
    np.testing.assert_allclose(np.linalg.norm(scaled.fan_in, axis=1), nw.mean_row_norm(net, 1))


@pytest.mark.parametrize("kind", ["random", "select", "pre", "weight", "gradmax", "firefly", "nest"])
def test_initializers_deterministic(kind):
    results = []
    for _ in range(2):
        net, X, _, trace, grads, buf, _ = setup(12, widths=(30, 8, 6, 3), n=60, buffer=60)
        rng = np.random.default_rng(99)
        new = {
            "random": lambda: ini.init_random(net, 1, 2, rng),
            "select": lambda: ini.init_select(net, buf, 1, 2, rng, ED, candidates=20),
            "pre": lambda: ini.init_preactivation(net, buf, 1, 2, rng, ED, candidates=20),
            "weight": lambda: ini.init_weight(net, 1, 2, rng),
            "gradmax": lambda: ini.init_gradmax(net, trace, grads, 1, 2),
            "firefly": lambda: ini.init_firefly(net, trace, grads, 1, 2, rng, candidates=20),
            "nest": lambda: ini.init_nest(net, trace, grads, 1, 2, rng),
        }[kind]()
        results.append(new)
    assert np.array_equal(results[0].fan_in, results[1].fan_in)
    assert np.array_equal(results[0].fan_out, results[1].fan_out)
    assert np.all(np.isfinite(results[0].fan_in)) and np.all(np.isfinite(results[0].fan_out))
