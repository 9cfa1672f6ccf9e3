import numpy as np
import pytest

from relucert.bounds import compute_bounds
from relucert.dual import dual_bound
from relucert.linops import DenseLayer, Network, forward
from relucert.oracle import (LpProblem, LpSizeError, build_lp, clip_halfplane,
                             convex_hull_2d, enumerate_basic_solutions,
                             lp_min, outer_polygon, polygon_area,
                             sample_polytope, solve_lp, tightness_report)


def rand_net(dims, rng):
    return Network([
        DenseLayer(rng.normal(scale=1 / np.sqrt(dims[j]),
                              size=(dims[j + 1], dims[j])),
                   rng.normal(size=dims[j + 1]))
        for j in range(len(dims) - 1)
    ])


def box_lp(obj, lb, ub):
    return LpProblem(np.asarray(obj, float), np.zeros((0, len(obj))),
                     np.zeros(0), np.zeros((0, len(obj))), np.zeros(0),
                     np.asarray(lb, float), np.asarray(ub, float))


class TestSimplex:
    def test_max_over_unit_box(self):
        # max x0 - x1 over [0,1]^2 == min -(x0 - x1), optimum at (1, 0)
        v, x = solve_lp(box_lp([-1.0, 1.0], [0, 0], [1, 1]))
        assert v == pytest.approx(-1.0, abs=1e-9)
        np.testing.assert_allclose(x, [1.0, 0.0], atol=1e-9)

    def test_free_and_mirrored_variables(self):
        # min x0 + x1, x0 free with x0 + x1 >= 1 (as -x0 - x1 <= -1), x1 <= 2
        p = LpProblem(np.array([1.0, 1.0]), np.zeros((0, 2)), np.zeros(0),
                      np.array([[-1.0, -1.0]]), np.array([-1.0]),
                      np.array([-np.inf, -np.inf]), np.array([np.inf, 2.0]))
        v, x = solve_lp(p)
        assert v == pytest.approx(1.0, abs=1e-9)

    def test_random_lps_match_enumeration(self):
        rng = np.random.default_rng(0)
        for trial in range(25):
            nv = 4
            p = LpProblem(rng.normal(size=nv),
                          rng.normal(size=(1, nv)), rng.normal(size=1) * 0.2,
                          rng.normal(size=(5, nv)), rng.normal(size=5) + 2.0,
                          np.full(nv, -2.0), np.full(nv, 2.0))
            want, _ = enumerate_basic_solutions(p)
            got, xs = solve_lp(p)
            assert got == pytest.approx(want, abs=1e-9)
            assert np.all(p.a_ub @ xs <= p.b_ub + 1e-7)

    def test_degenerate_lp_terminates(self):
        # many redundant constraints through one vertex; Bland's rule must
        # still terminate
        a_ub = np.array([[1.0, 0.0], [1.0, 1e-14], [1.0, -1e-14],
                         [0.0, 1.0]])
        b_ub = np.array([1.0, 1.0, 1.0, 1.0])
        p = LpProblem(np.array([-1.0, -1.0]), np.zeros((0, 2)), np.zeros(0),
                      a_ub, b_ub, np.zeros(2), np.full(2, np.inf))
        v, _ = solve_lp(p)
        assert v == pytest.approx(-2.0, abs=1e-7)


class TestRelaxationLp:
    def test_linear_net_reduces_to_closed_form(self):
        rng = np.random.default_rng(1)
        net = rand_net([3, 2], rng)
        x = rng.normal(size=3)
        b = compute_bounds(net, x, 0.2)
        c = rng.normal(size=2)
        w, bias = net.layers[0].weight.value, net.layers[0].bias.value
        want = c @ (w @ x + bias) - 0.2 * np.abs(w.T @ c).sum()
        assert lp_min(net, b, x, 0.2, c) == pytest.approx(want, abs=1e-8)

    def test_span_triple_counts(self):
        rng = np.random.default_rng(2)
        net = rand_net([2, 6, 4, 2], rng)
        x = rng.uniform(0, 1, 2)
        b = compute_bounds(net, x, 0.2)
        p = build_lp(net, b, x, 0.2, np.array([1.0, -1.0]))
        n_span = sum(int(s.sum()) for s in b.partition.span)
        assert p.a_ub.shape[0] == 3 * n_span

    def test_empty_span_matches_dual_exactly(self):
        rng = np.random.default_rng(3)
        hits = 0
        for _ in range(20):
            net = rand_net([2, 5, 2], rng)
            x = rng.uniform(0, 1, 2)
            b = compute_bounds(net, x, 0.005)
            if any(s.any() for s in b.partition.span):
                continue
            hits += 1
            c = rng.normal(size=2)
            lp = lp_min(net, b, x, 0.005, c)
            j = dual_bound(net, x, 0.005, c)[0]
            assert lp == pytest.approx(j, abs=1e-6)
        assert hits >= 3

    def test_true_activation_trace_is_feasible(self):
        # relaxation containment: plug sampled true traces into the LP rows
        rng = np.random.default_rng(4)
        net = rand_net([2, 5, 4, 2], rng)
        x = rng.uniform(0, 1, 2)
        eps = 0.15
        b = compute_bounds(net, x, eps)
        p = build_lp(net, b, x, eps, np.zeros(2))
        sl = p.var_slices
        for _ in range(200):
            delta = rng.uniform(-eps, eps, 2)
            _, pre = forward(net, x + delta, capture=True)
            v = np.zeros(p.obj.size)
            v[sl["z1"]] = x + delta
            for i in range(2, net.k + 1):
                v[sl[f"zhat{i}"]] = pre[i - 2]
            for i in range(2, net.k):
                span = np.flatnonzero(b.partition.span[i - 2])
                v[sl[f"zspan{i}"]] = np.maximum(pre[i - 2][span], 0.0)
            assert np.all(p.a_eq @ v - p.b_eq <= 1e-9)
            assert np.all(p.a_ub @ v - p.b_ub <= 1e-9)
            assert np.all(v >= p.lb - 1e-9) and np.all(v <= p.ub + 1e-9)

    def test_sandwich_j_lp_truth(self):
        rng = np.random.default_rng(5)
        net = rand_net([2, 6, 5, 2], rng)
        x = rng.uniform(0, 1, 2)
        eps = 0.1
        b = compute_bounds(net, x, eps)
        c = rng.normal(size=2)
        j = dual_bound(net, x, eps, c)[0]
        lp = lp_min(net, b, x, eps, c)
        deltas = rng.uniform(-eps, eps, size=(5000, 2))
        truth = float((forward(net, x + deltas) @ c).min())
        assert j <= lp + 1e-6 <= truth + 2e-6

    def test_size_guard(self):
        rng = np.random.default_rng(6)
        net = rand_net([2, 2000, 2], rng)
        b = compute_bounds(net, [0.5, 0.5], 0.05)
        with pytest.raises(LpSizeError):
            build_lp(net, b, [0.5, 0.5], 0.05, np.array([1.0, 0.0]))


class TestGeometry:
    def test_hull_of_square_plus_interior(self):
        pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1],
                        [0.5, 0.5], [0.2, 0.7]])
        hull = convex_hull_2d(pts)
        assert len(hull) == 4
        assert polygon_area(hull) == pytest.approx(1.0)

    def test_shoelace_triangle(self):
        assert polygon_area([[0, 0], [2, 0], [0, 2]]) == pytest.approx(2.0)

    def test_halfplane_clip(self):
        square = np.array([[0.0, 0], [2, 0], [2, 2], [0, 2]])
        clipped = clip_halfplane(square, np.array([1.0, 0.0]), 1.0)  # x >= 1
        assert polygon_area(clipped) == pytest.approx(2.0)


class TestPolytopeSampling:
    def test_linear_net_fills_parallelogram(self):
        rng = np.random.default_rng(7)
        net = rand_net([2, 2], rng)
        x = rng.uniform(0, 1, 2)
        s = sample_polytope(net, x, 0.2, grid_per_dim=41)
        w = net.layers[0].weight.value
        corners = np.array([[a, b] for a in (-0.2, 0.2) for b in (-0.2, 0.2)])
        want = forward(net, x + corners)
        hull_want = convex_hull_2d(want)
        assert polygon_area(s.hull) == pytest.approx(
            polygon_area(hull_want), rel=1e-6)
        assert np.all(np.abs(s.deltas) <= 0.2 + 1e-12)

    def test_dimension_guard(self):
        rng = np.random.default_rng(8)
        net = rand_net([4, 2], rng)
        with pytest.raises(ValueError):
            sample_polytope(net, np.zeros(4), 0.1)

    def test_outer_polygon_contains_true_hull(self):
        rng = np.random.default_rng(9)
        net = rand_net([2, 8, 8, 2], rng)
        x = rng.uniform(0, 1, 2)
        s = sample_polytope(net, x, 0.1, grid_per_dim=41)
        poly, dirs, j = outer_polygon(net, x, 0.1, n_dirs=32)
        # every sampled output satisfies every certified halfplane
        for t in range(len(j)):
            assert np.all(s.outputs @ dirs[t] >= j[t] - 1e-9)
        assert polygon_area(poly) >= polygon_area(s.hull) - 1e-9

    def test_area_ratio_grows_with_eps(self):
        net = rand_net([2, 12, 12, 2], np.random.default_rng(11))
        x = np.array([0.5, 0.5])
        ratios = []
        for eps in (0.05, 0.1, 0.25):
            s = sample_polytope(net, x, eps, grid_per_dim=61)
            poly, _, _ = outer_polygon(net, x, eps, n_dirs=32)
            ratios.append(polygon_area(poly) / polygon_area(s.hull))
        assert ratios[0] <= ratios[1] <= ratios[2]


class TestTightnessReport:
    def test_gap_nonnegative_and_summary(self):
        rng = np.random.default_rng(10)
        net = rand_net([2, 5, 3, 2], rng)
        xs = rng.uniform(0, 1, size=(3, 2))
        targets = rng.normal(size=(2, 2))
        rows, summary = tightness_report(net, xs, 0.1, targets)
        assert len(rows) == 6
        for _, _, j, lp, gap in rows:
            assert gap >= -1e-6
            assert gap == pytest.approx(lp - j, abs=1e-12)
        assert summary["n"] == 6
        assert summary["min_gap"] >= -1e-6
