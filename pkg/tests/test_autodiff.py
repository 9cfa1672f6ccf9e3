import numpy as np
import pytest

from relucert import autodiff as ad


def numeric_grad(fn, x, step=1e-6):
    """Central-difference gradient of scalar fn at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def check_grad(build, x, rtol=1e-6, atol=1e-8):
    """build(Var) -> Var scalar; compares backward grad to finite differences."""
    v = ad.Var(x.copy(), requires_grad=True)
    out = build(v)
    out.backward()
    num = numeric_grad(lambda arr: float(ad.val(build(ad.Var(arr)))), x.copy())
    np.testing.assert_allclose(v.grad, num, rtol=rtol, atol=atol)


RNG = np.random.default_rng(7)


class TestElementwise:
    def test_add_mul_broadcast(self):
        a = RNG.normal(size=(3, 4))
        b = RNG.normal(size=(4,))
        check_grad(lambda v: ad.asum(ad.mul(ad.add(v, b), v)), a)

    def test_div(self):
        a = RNG.normal(size=(5,)) + 3.0
        check_grad(lambda v: ad.asum(ad.div(1.5, ad.add(v, 1.0))), a)
        check_grad(lambda v: ad.asum(ad.div(v, 2.0)), a)

    def test_relu_kink_away(self):
        a = RNG.normal(size=(6,))
        a[np.abs(a) < 0.05] = 0.1
        check_grad(lambda v: ad.asum(ad.relu(v)), a)

    def test_neg_sub(self):
        a = RNG.normal(size=(4,))
        check_grad(lambda v: ad.asum(ad.sub(ad.neg(v), v * 2.0)), a)

    def test_sqrt(self):
        a = np.abs(RNG.normal(size=(4,))) + 0.5
        check_grad(lambda v: ad.asum(ad.sqrt(v)), a)


class TestLinalg:
    def test_matmul_2d(self):
        a = RNG.normal(size=(3, 4))
        b = RNG.normal(size=(4, 2))
        check_grad(lambda v: ad.asum(ad.matmul(v, b)), a)
        check_grad(lambda v: ad.asum(ad.matmul(a, v)), b)

    def test_matmul_vec(self):
        a = RNG.normal(size=(3, 4))
        x = RNG.normal(size=(4,))
        check_grad(lambda v: ad.asum(ad.matmul(v, x)), a)
        check_grad(lambda v: ad.asum(ad.matmul(a, v)), x)

    def test_matmul_batched_shared(self):
        a = RNG.normal(size=(2, 3, 4))
        b = RNG.normal(size=(4, 5))
        check_grad(lambda v: ad.asum(ad.matmul(v, b)), a)
        check_grad(lambda v: ad.asum(ad.matmul(a, v)), b)

    def test_transpose_reshape(self):
        a = RNG.normal(size=(2, 3, 4))
        check_grad(lambda v: ad.asum(ad.mul(ad.transpose(v, (1, 0, 2)), 2.0)), a)
        check_grad(lambda v: ad.asum(ad.reshape(v, (6, 4))[0:3] if isinstance(v, np.ndarray) else ad.reshape(v, (24,))), a)

    def test_concat_rows(self):
        a = RNG.normal(size=(3, 2))
        b = RNG.normal(size=(2, 2))
        v = ad.Var(a, requires_grad=True)
        w = ad.Var(b, requires_grad=True)
        out = ad.asum(ad.mul(ad.concat_rows([v, w]), np.arange(10.0).reshape(5, 2)))
        out.backward()
        np.testing.assert_allclose(v.grad, np.arange(6.0).reshape(3, 2))
        np.testing.assert_allclose(w.grad, np.arange(6.0, 10.0).reshape(2, 2))


class TestReductions:
    def test_sum_axis(self):
        a = RNG.normal(size=(3, 4, 2))
        check_grad(lambda v: ad.asum(ad.mul(ad.asum(v, axis=1), 3.0)), a)

    def test_mean(self):
        a = RNG.normal(size=(5, 3))
        check_grad(lambda v: ad.amean(v), a)

    def test_l1norm(self):
        a = RNG.normal(size=(4, 3))
        a[np.abs(a) < 0.05] = 0.2
        check_grad(lambda v: ad.asum(ad.l1norm(v, axis=0)), a)
        check_grad(lambda v: ad.asum(ad.l1norm(v, axis=1)), a)

    def test_l2norm(self):
        a = RNG.normal(size=(4, 3))
        check_grad(lambda v: ad.asum(ad.l2norm(v, axis=1)), a)

    def test_l2norm_zero_row_subgradient(self):
        a = np.zeros((2, 3))
        v = ad.Var(a, requires_grad=True)
        out = ad.asum(ad.l2norm(v, axis=1))
        out.backward()
        assert np.all(np.isfinite(v.grad))
        np.testing.assert_allclose(v.grad, 0.0)


class TestIndexing:
    def test_gather_rows_with_repeats(self):
        a = RNG.normal(size=(4, 3))
        idx = np.array([0, 2, 2, 1])
        check_grad(lambda v: ad.asum(ad.mul(ad.gather_rows(v, idx), np.arange(12.0).reshape(4, 3))), a)

    def test_take_flat(self):
        a = RNG.normal(size=(3, 4))
        idx = np.array([0, 5, 5, 11])
        check_grad(lambda v: ad.asum(ad.mul(ad.take_flat(v, idx), np.array([1.0, 2, 3, 4]))), a)

    def test_scatter_flat(self):
        vals = RNG.normal(size=(3,))
        idx = np.array([1, 4, 7])
        check_grad(lambda v: ad.asum(ad.mul(ad.scatter_flat(v, idx, (2, 4)), np.arange(8.0).reshape(2, 4))), vals)

    def test_scale_rows_by_owner(self):
        a = RNG.normal(size=(5, 3))
        d = RNG.normal(size=(2, 3))
        owner = np.array([0, 0, 0, 1, 1])
        w = np.arange(15.0).reshape(5, 3)
        check_grad(lambda v: ad.asum(ad.mul(ad.scale_rows_by_owner(v, d, owner), w)), a)
        check_grad(lambda v: ad.asum(ad.mul(ad.scale_rows_by_owner(ad.Var(a), v, owner), w)), d)

    def test_segment_sum_with_empty_segment(self):
        a = RNG.normal(size=(5, 2))
        owner = np.array([0, 0, 2, 2, 2])
        out = ad.segment_sum(ad.Var(a), owner, 3)
        np.testing.assert_allclose(out.value[0], a[:2].sum(axis=0))
        np.testing.assert_allclose(out.value[1], 0.0)
        np.testing.assert_allclose(out.value[2], a[2:].sum(axis=0))
        w = np.arange(6.0).reshape(3, 2)
        check_grad(lambda v: ad.asum(ad.mul(ad.segment_sum(v, owner, 3), w)), a)


class TestLoss:
    def test_cross_entropy_matches_reference(self):
        logits = RNG.normal(size=(4, 3))
        y = np.array([0, 2, 1, 1])
        out = ad.cross_entropy_mean(ad.Var(logits), y)
        ref = np.mean([
            np.log(np.exp(row).sum()) - row[t] for row, t in zip(logits, y)
        ])
        np.testing.assert_allclose(ad.val(out), ref, rtol=1e-12)

    def test_cross_entropy_grad(self):
        logits = RNG.normal(size=(3, 4))
        y = np.array([1, 0, 3])
        check_grad(lambda v: ad.cross_entropy_mean(v, y), logits)


class TestGraphMechanics:
    def test_no_grad_blocks_recording(self):
        v = ad.Var(np.ones(3), requires_grad=True)
        with ad.no_grad():
            out = ad.asum(v * 2.0)
        assert not out.requires_grad

    def test_constants_not_tracked(self):
        out = ad.asum(ad.mul(np.ones(3), 2.0) if False else ad.Var(np.ones(3)) * 2.0)
        assert not out.requires_grad

    def test_grad_accumulates_across_uses(self):
        v = ad.Var(np.array([2.0]), requires_grad=True)
        out = ad.asum(v * v + v * 3.0)
        out.backward()
        np.testing.assert_allclose(v.grad, [7.0])

    def test_diamond_graph(self):
        v = ad.Var(np.array([1.5]), requires_grad=True)
        a = v * 2.0
        b = v * 3.0
        out = ad.asum(a * b)
        out.backward()
        np.testing.assert_allclose(v.grad, [2 * 6 * 1.5])

    def test_no_grad_is_thread_local(self):
        # overlapping no_grad scopes on worker threads must not disable
        # recording for anyone else
        import threading
        import time

        def worker():
            with ad.no_grad():
                time.sleep(0.02)

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        time.sleep(0.01)
        v = ad.Var(np.ones(2), requires_grad=True)
        out = ad.asum(v * 2.0)
        for t in threads:
            t.join()
        assert out.requires_grad
        out.backward()
        np.testing.assert_allclose(v.grad, [2.0, 2.0])
