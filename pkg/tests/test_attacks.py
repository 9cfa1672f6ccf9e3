import numpy as np
import pytest

from relucert.attacks import attack_error, fgsm, pgd
from relucert.linops import DenseLayer, Network, forward
from relucert.models import build_mlp


def rand_net(dims, rng, bias_scale=0.3):
    return Network([
        DenseLayer(rng.normal(scale=1 / np.sqrt(dims[j]),
                              size=(dims[j + 1], dims[j])),
                   bias_scale * rng.normal(size=dims[j + 1]))
        for j in range(len(dims) - 1)
    ])


class TestFgsm:
    def test_linear_net_is_exact_worst_case(self):
        rng = np.random.default_rng(0)
        net = rand_net([3, 2], rng)
        x = rng.normal(size=3)
        y = int(np.argmax(forward(net, x)))
        eps = 0.3
        res = fgsm(net, x, y, eps)
        w = net.layers[0].weight.value
        # worst case for the binary margin is eps * sign(w_other - w_y)
        worst = x + eps * np.sign(w[1 - y] - w[y])
        np.testing.assert_allclose(res.adversarial[0], worst, atol=1e-12)

    def test_ball_containment_with_domain(self):
        rng = np.random.default_rng(1)
        net = rand_net([4, 3], rng)
        xs = rng.uniform(0, 1, size=(8, 4))
        ys = rng.integers(0, 3, 8)
        res = fgsm(net, xs, ys, 0.2, domain=(0.0, 1.0))
        assert np.all(np.abs(res.adversarial - xs) <= 0.2 + 1e-9)
        assert np.all(res.adversarial >= -1e-12)
        assert np.all(res.adversarial <= 1 + 1e-12)

    def test_success_flag_matches_prediction(self):
        rng = np.random.default_rng(2)
        net = rand_net([2, 6, 2], rng)
        xs = rng.uniform(0, 1, size=(10, 2))
        ys = forward(net, xs).argmax(axis=1)
        res = fgsm(net, xs, ys, 0.1)
        preds = forward(net, res.adversarial).argmax(axis=1)
        np.testing.assert_array_equal(res.success, preds != ys)


class TestPgd:
    def test_one_step_full_size_equals_fgsm(self):
        rng = np.random.default_rng(3)
        net = rand_net([3, 4, 2], rng)
        xs = rng.uniform(0, 1, size=(5, 3))
        ys = rng.integers(0, 2, 5)
        f = fgsm(net, xs, ys, 0.15)
        p = pgd(net, xs, ys, 0.15, steps=1, step_size=0.15, restarts=1)
        np.testing.assert_allclose(p.adversarial, f.adversarial, atol=1e-12)

    def test_ball_containment(self):
        rng = np.random.default_rng(4)
        net = rand_net([3, 5, 3], rng)
        xs = rng.uniform(0, 1, size=(6, 3))
        ys = rng.integers(0, 3, 6)
        res = pgd(net, xs, ys, 0.1, steps=10, restarts=4, domain=(0, 1),
                  seed=1)
        assert np.all(np.abs(res.adversarial - xs) <= 0.1 + 1e-9)
        assert np.all((res.adversarial >= 0) & (res.adversarial <= 1))

    def test_pgd_at_least_fgsm_loss(self):
        rng = np.random.default_rng(5)
        net = rand_net([2, 10, 10, 2], rng)
        xs = rng.uniform(0, 1, size=(12, 2))
        ys = forward(net, xs).argmax(axis=1)
        eps = 0.1
        f = fgsm(net, xs, ys, eps)
        p = pgd(net, xs, ys, eps, steps=40, restarts=5, seed=0)
        assert np.mean(p.loss >= f.loss - 1e-9) >= 0.9
        assert attack_error(p) >= attack_error(f) - 1e-12

    def test_steps_validation_and_queries(self):
        rng = np.random.default_rng(6)
        net = rand_net([2, 3, 2], rng)
        with pytest.raises(ValueError):
            pgd(net, np.zeros((1, 2)), [0], 0.1, steps=0)
        res = pgd(net, np.zeros((1, 2)), [0], 0.1, steps=5, restarts=3)
        assert res.queries[0] == 3 * (5 + 1)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(7)
        net = rand_net([2, 6, 2], rng)
        xs = rng.uniform(0, 1, size=(4, 2))
        ys = rng.integers(0, 2, 4)
        r1 = pgd(net, xs, ys, 0.1, steps=8, restarts=4, seed=9)
        r2 = pgd(net, xs, ys, 0.1, steps=8, restarts=4, seed=9)
        np.testing.assert_array_equal(r1.adversarial, r2.adversarial)

    def test_standard_net_more_vulnerable_than_clean_error(self):
        # train a small standard classifier and show FGSM error exceeds
        # clean error by a clear factor
        from relucert.data import gen_2d
        from relucert.training import TrainConfig, train
        ds = gen_2d(1, n_points=10)
        net = build_mlp([2, 24, 24, 2], seed=0)
        cfg = TrainConfig(eps_target=0.1, epochs=400, batch_size=10, seed=0,
                          objective="standard", lr=5e-3)
        train(net, ds.inputs, ds.labels, cfg)
        clean_err = float(np.mean(
            forward(net, ds.inputs).argmax(axis=1) != ds.labels))
        assert clean_err == 0.0
        res = pgd(net, ds.inputs, ds.labels, 0.25, steps=40, restarts=10,
                  seed=0)
        assert attack_error(res) > 0.0
