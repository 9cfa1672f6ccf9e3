import numpy as np
import pytest

from relucert.bounds import (PassStats, compute_bounds, index_set_stats,
                             naive_layerwise_bounds)
from relucert.dual import L2, LINF, dual_bound
from relucert.linops import DenseLayer, Network, forward
from relucert.models import build_mlp

from _reference import network_forward_naive


def rand_net(dims, rng, bias_scale=1.0):
    return Network([
        DenseLayer(rng.normal(scale=1 / np.sqrt(dims[j]),
                              size=(dims[j + 1], dims[j])),
                   bias_scale * rng.normal(size=dims[j + 1]))
        for j in range(len(dims) - 1)
    ])


class TestComputeBounds:
    def test_single_layer_closed_form(self):
        net = Network([DenseLayer(np.array([[1.0, -1.0]]), np.zeros(1))])
        b = compute_bounds(net, [0.0, 0.0], 0.5)
        np.testing.assert_allclose(b.lower[0], [-1.0])
        np.testing.assert_allclose(b.upper[0], [1.0])

    def test_fixed_activation_net_is_exact_affine(self):
        # hidden bounds never span zero -> deeper bounds equal the interval
        # image of the induced linear map (computed by an affine-arithmetic
        # oracle on the fixed ReLU pattern)
        rng = np.random.default_rng(0)
        w1 = rng.normal(size=(3, 2))
        b1 = np.array([5.0, 5.0, -9.0])  # units decisively on / off
        w2 = rng.normal(size=(2, 3))
        b2 = rng.normal(size=2)
        net = Network([DenseLayer(w1, b1), DenseLayer(w2, b2)])
        x = np.array([0.3, -0.2])
        eps = 0.05
        b = compute_bounds(net, x, eps)
        assert not b.partition.span[0].any()
        active = np.diag((b.lower[0] > 0).astype(float))
        m = w2 @ active @ w1
        center = w2 @ active @ (w1 @ x + b1) + b2
        rad = eps * np.abs(m).sum(axis=1)
        np.testing.assert_allclose(b.lower[1], center - rad, atol=1e-12)
        np.testing.assert_allclose(b.upper[1], center + rad, atol=1e-12)

    def test_soundness_random_nets_paper_init(self):
        # N(0, 1/sqrt(n_in)) weights, N(0,1) biases; sampled pre-activations
        # must stay inside [l, u]
        for seed, eps in [(1, 0.05), (2, 0.1), (3, 0.25)]:
            net = build_mlp([2, 20, 20, 2], seed=seed, init="paper")
            rng = np.random.default_rng(seed + 100)
            x = rng.uniform(0, 1, 2)
            b = compute_bounds(net, x, eps)
            deltas = rng.uniform(-eps, eps, size=(2000, 2))
            _, pre = forward(net, x + deltas, capture=True)
            for li, ui, zi in zip(b.lower, b.upper, pre):
                assert np.all(zi >= li - 1e-9)
                assert np.all(zi <= ui + 1e-9)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(5)
        net = rand_net([3, 6, 5, 2], rng)
        xs = rng.uniform(0, 1, size=(4, 3))
        bb = compute_bounds(net, xs, 0.1)
        assert bb.batched
        for i in range(4):
            bi = compute_bounds(net, xs[i], 0.1)
            for lay in range(len(bi.lower)):
                np.testing.assert_allclose(bb.lower[lay][i], bi.lower[lay],
                                           atol=1e-12)
                np.testing.assert_allclose(bb.upper[lay][i], bi.upper[lay],
                                           atol=1e-12)

    def test_eps_monotonicity(self):
        rng = np.random.default_rng(6)
        net = rand_net([2, 8, 8, 3], rng)
        x = rng.uniform(0, 1, 2)
        prev = compute_bounds(net, x, 0.02)
        for eps in (0.05, 0.1, 0.2):
            cur = compute_bounds(net, x, eps)
            for lay in range(len(cur.lower)):
                assert np.all(cur.lower[lay] <= prev.lower[lay] + 1e-12)
                assert np.all(cur.upper[lay] >= prev.upper[lay] - 1e-12)
            prev = cur

    def test_rejects_negative_eps_and_bad_dims(self):
        net = rand_net([2, 3, 2], np.random.default_rng(0))
        with pytest.raises(ValueError):
            compute_bounds(net, [0.0, 0.0], -0.1)
        with pytest.raises(Exception, match="layer 0"):
            compute_bounds(net, [0.0, 0.0, 0.0], 0.1)

    def test_consistency_with_truncated_dual(self):
        # dual_bound with +/- basis objectives on truncated nets must
        # reproduce the incrementally computed bounds (definitionally)
        rng = np.random.default_rng(7)
        net = rand_net([2, 6, 5, 4, 2], rng)
        x = rng.uniform(0, 1, 2)
        eps = 0.15
        b = compute_bounds(net, x, eps)
        for i in range(1, net.k):
            sub = net.truncated(i)
            n = sub.output_dim
            low = dual_bound(sub, x, eps, np.eye(n))
            high = -dual_bound(sub, x, eps, -np.eye(n))
            np.testing.assert_allclose(low, b.lower[i - 1], atol=1e-9)
            np.testing.assert_allclose(high, b.upper[i - 1], atol=1e-9)

    def test_l2_ball_soundness_and_first_layer(self):
        rng = np.random.default_rng(8)
        net = rand_net([2, 6, 3], rng)
        x = rng.uniform(0, 1, 2)
        eps = 0.3
        b = compute_bounds(net, x, eps, norm=L2)
        w1 = net.layers[0].weight.value
        rad = eps * np.sqrt((w1 ** 2).sum(axis=1))
        z = w1 @ x + net.layers[0].bias.value
        np.testing.assert_allclose(b.lower[0], z - rad, atol=1e-12)
        for _ in range(500):
            d = rng.normal(size=2)
            d *= rng.uniform(0, eps) / np.linalg.norm(d)
            _, pre = forward(net, x + d, capture=True)
            for li, ui, zi in zip(b.lower, b.upper, pre):
                assert np.all(zi >= li - 1e-9) and np.all(zi <= ui + 1e-9)

    def test_cost_structure_counter(self):
        # one basis pass per layer transition plus one suffix pass per span
        # activation, counted in propagated rows
        rng = np.random.default_rng(9)
        net = rand_net([3, 7, 6, 5, 2], rng)
        x = rng.uniform(0, 1, 3)
        stats = PassStats()
        b = compute_bounds(net, x, 0.2, stats_out=stats)
        k = net.k
        assert stats.basis_rows == 3 * (k - 2)
        spans = [int(s.sum()) for s in b.partition.span]
        expected = 0
        for i in range(2, k):          # step computing bounds of layer i+1
            for j in range(2, i):      # blocks created at earlier layers
                expected += spans[j - 2]
        assert stats.block_rows == expected


class TestNaiveLayerwise:
    def test_first_hidden_layer_matches_exactly(self):
        rng = np.random.default_rng(10)
        net = rand_net([2, 9, 7, 2], rng)
        x = rng.uniform(0, 1, 2)
        nb = naive_layerwise_bounds(net, x, 0.1)
        b = compute_bounds(net, x, 0.1)
        np.testing.assert_array_equal(nb.lower[0], b.lower[0])
        np.testing.assert_array_equal(nb.upper[0], b.upper[0])

    def test_single_layer_identical(self):
        rng = np.random.default_rng(11)
        net = rand_net([3, 4], rng)
        x = rng.uniform(0, 1, 3)
        nb = naive_layerwise_bounds(net, x, 0.25)
        b = compute_bounds(net, x, 0.25)
        np.testing.assert_allclose(nb.lower[0], b.lower[0], atol=1e-12)
        np.testing.assert_allclose(nb.upper[0], b.upper[0], atol=1e-12)

    def test_deep_regime_naive_never_tighter_in_aggregate(self):
        # the two relaxations are incomparable per unit (see the failing
        # dominance acceptance check), but on deep nets the naive total
        # width is always far larger
        rng = np.random.default_rng(12)
        for trial in range(5):
            net = rand_net([2, 8, 8, 8, 2], rng)
            x = rng.uniform(0, 1, 2)
            nb = naive_layerwise_bounds(net, x, 0.1)
            b = compute_bounds(net, x, 0.1)
            naive_w = float((nb.upper[-1] - nb.lower[-1]).sum())
            dual_w = float((b.upper[-1] - b.lower[-1]).sum())
            assert naive_w >= dual_w - 1e-9

    def test_naive_soundness(self):
        rng = np.random.default_rng(13)
        net = rand_net([2, 6, 6, 2], rng)
        x = rng.uniform(0, 1, 2)
        nb = naive_layerwise_bounds(net, x, 0.15)
        for _ in range(1000):
            d = rng.uniform(-0.15, 0.15, 2)
            _, pre = forward(net, x + d, capture=True)
            for li, ui, zi in zip(nb.lower, nb.upper, pre):
                assert np.all(zi >= li - 1e-9) and np.all(zi <= ui + 1e-9)

    def test_final_layer_much_wider_on_deep_random_net(self):
        # the loose-baseline comparison regime: deep random net, width
        # ratio of the final boxes exceeds 10x
        net = build_mlp([2, 100, 100, 100, 100, 2], seed=3, init="paper")
        x = np.array([0.5, 0.5])
        nb = naive_layerwise_bounds(net, x, 0.05)
        b = compute_bounds(net, x, 0.05)
        naive_width = (nb.upper[-1] - nb.lower[-1]).mean()
        dual_width = (b.upper[-1] - b.lower[-1]).mean()
        assert naive_width > 10 * dual_width


class TestIndexStats:
    def test_all_positive(self):
        net = Network([DenseLayer(np.eye(2), np.full(2, 10.0)),
                       DenseLayer(np.eye(2), np.zeros(2))])
        b = compute_bounds(net, [0.0, 0.0], 0.5)
        assert index_set_stats(b) == [(0.0, 1.0, 0.0)]

    def test_all_spanning(self):
        net = Network([DenseLayer(np.eye(2), np.zeros(2)),
                       DenseLayer(np.eye(2), np.zeros(2))])
        b = compute_bounds(net, [0.0, 0.0], 0.5)
        assert index_set_stats(b) == [(0.0, 0.0, 1.0)]

    def test_fractions_sum_to_one(self):
        rng = np.random.default_rng(14)
        net = rand_net([2, 9, 9, 2], rng)
        b = compute_bounds(net, rng.uniform(0, 1, 2), 0.1)
        for fracs in index_set_stats(b):
            assert abs(sum(fracs) - 1.0) < 1e-12


class TestPartitionRules:
    def test_boundary_and_degenerate_cases(self):
        from relucert.dual import classify
        lower = np.array([0.0, -1.0, -1e-15, 0.0, -1.0, 1.0])
        upper = np.array([1.0, 0.0, 1e-15, 0.0, 1.0, 2.0])
        neg, pos, span = classify(lower, upper)
        assert pos[0]          # l == 0 exactly -> I+
        assert neg[1]          # u == 0 exactly -> I-
        assert neg[2]          # degenerate sliver straddling zero -> I-
        assert neg[3]          # tie l == u == 0 -> I-
        assert span[4]
        assert pos[5]
        assert np.all(neg.astype(int) + pos.astype(int) + span.astype(int)
                      == 1)

    def test_eps_zero_degenerates_cleanly(self):
        rng = np.random.default_rng(15)
        net = rand_net([2, 5, 3], rng)
        x = rng.uniform(0, 1, 2)
        b = compute_bounds(net, x, 0.0)
        _, pre = forward(net, x, capture=True)
        for li, ui, zi in zip(b.lower, b.upper, pre):
            np.testing.assert_allclose(li, zi, atol=1e-12)
            np.testing.assert_allclose(ui, zi, atol=1e-12)
        assert not b.partition.span[0].any()


class TestBoundPropState:
    def test_state_matrices_exposed_and_psi_identity(self):
        rng = np.random.default_rng(16)
        net = rand_net([2, 6, 5, 3], rng)
        x = rng.uniform(0, 1, 2)
        b, state = compute_bounds(net, x, 0.2, capture_state=True)
        assert state.nu_hat_1.shape == (1, 2, 3)
        # psi_i = x^T nu_hat_1 + sum of gammas at the final width
        want = x @ state.nu_hat_1[0] + sum(g[0] for g in state.gammas)
        np.testing.assert_allclose(state.psis[-1][0], want, atol=1e-9)
        for layer_idx, blk in state.nu_blocks.items():
            assert blk.shape[0] == int(
                b.partition.span[layer_idx - 2].sum())
