"""Ground-truth machinery: the explicit relaxation LP solved by a
self-contained dense simplex, plus brute-force polytope sampling.

These exist to validate the dual bounds: the LP optimum sits between the
dual objective J and the true minimum over sampled perturbations, and for
tiny problems the simplex itself is checked against basic-solution
enumeration.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .bounds import PreActBounds, compute_bounds
from .dual import LINF, dual_backward, dual_objective
from .linops import Network, adjoint_on_basis, as_input

MAX_LP_VARS = 2000


class LpSizeError(ValueError):
    """Network exceeds the LP variable guard."""


class LpInfeasible(RuntimeError):
    pass


class LpUnbounded(RuntimeError):
    pass


@dataclass
class LpProblem:
    """min obj @ v  s.t.  a_eq v = b_eq, a_ub v <= b_ub, lb <= v <= ub."""

    obj: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    a_ub: np.ndarray
    b_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    var_slices: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# dense two-phase simplex, Bland's rule throughout
# --------------------------------------------------------------------------

_TOL = 1e-9


def _pivot(t, basis, row, col):
    t[row] /= t[row, col]
    for r in range(t.shape[0]):
        if r != row and abs(t[r, col]) > 0.0:
            t[r] -= t[r, col] * t[row]
    basis[row] = col


def _run_simplex(t, basis, cost, ncols):
    """Iterate Bland pivots on tableau `t` (rows x ncols+1, last col = rhs)
    until no reduced cost is negative.  Returns objective value."""
    m = t.shape[0]
    max_iter = 50000 + 200 * (m + ncols)
    for _ in range(max_iter):
        cb = cost[basis]
        red = cost[:ncols] - cb @ t[:, :ncols]
        enter = -1
        for j in range(ncols):
            if red[j] < -_TOL:
                enter = j
                break
        if enter < 0:
            return float(cb @ t[:, -1])
        ratios = np.full(m, np.inf)
        col = t[:, enter]
        ok = col > _TOL
        ratios[ok] = t[ok, -1] / col[ok]
        best = np.inf
        leave = -1
        for r in range(m):
            if not np.isfinite(ratios[r]):
                continue
            if ratios[r] < best - _TOL:
                best, leave = ratios[r], r
            elif ratios[r] <= best + _TOL and basis[r] < basis[leave]:
                leave = r
        if leave < 0:
            raise LpUnbounded("unbounded direction in simplex")
        _pivot(t, basis, leave, enter)
    raise RuntimeError("simplex iteration guard tripped")


def _solve_standard(a, b, c):
    """min c x, a x = b, x >= 0; returns (value, x)."""
    a = np.asarray(a, dtype=np.float64).copy()
    b = np.asarray(b, dtype=np.float64).copy()
    c = np.asarray(c, dtype=np.float64)
    m, n = a.shape
    flip = b < 0
    a[flip] *= -1.0
    b[flip] *= -1.0
    t = np.hstack([a, np.eye(m), b[:, None]])
    basis = list(range(n, n + m))
    phase1 = np.concatenate([np.zeros(n), np.ones(m)])
    v1 = _run_simplex(t, basis, phase1, n + m)
    if v1 > 1e-7:
        raise LpInfeasible(f"phase-1 residual {v1:.3e}")
    # drive remaining artificials out of the basis (or drop dead rows)
    keep = []
    for r in range(m):
        if basis[r] < n:
            keep.append(r)
            continue
        piv = -1
        for j in range(n):
            if abs(t[r, j]) > _TOL:
                piv = j
                break
        if piv >= 0:
            _pivot(t, basis, r, piv)
            keep.append(r)
    if len(keep) < m:
        t = t[keep]
        basis = [basis[r] for r in keep]
        m = len(keep)
    t = np.hstack([t[:, :n], t[:, -1:]])
    value = _run_simplex(t, basis, c, n)
    x = np.zeros(n)
    for r, j in enumerate(basis):
        x[j] = t[r, -1]
    return value, x


def solve_lp(p: LpProblem):
    """Exact optimum and primal solution of a general-form LP."""
    nv = p.obj.size
    n_ub = 0 if p.a_ub is None else p.a_ub.shape[0]
    # shift/split variables into the nonneg standard form
    cols = []          # per original var: (kind, std indices)
    shift = np.zeros(nv)
    std_cols = 0
    extra_rows = []    # upper-bound rows added for doubly-bounded vars
    for j in range(nv):
        lo, hi = p.lb[j], p.ub[j]
        if np.isfinite(lo):
            cols.append(("shift", std_cols))
            shift[j] = lo
            std_cols += 1
            if np.isfinite(hi):
                extra_rows.append((j, hi - lo))
        elif np.isfinite(hi):
            cols.append(("mirror", std_cols))
            shift[j] = hi
            std_cols += 1
        else:
            cols.append(("split", std_cols))
            std_cols += 2

    n_extra = len(extra_rows)
    n_slack = n_ub + n_extra
    n_std = std_cols + n_slack
    m = (p.a_eq.shape[0] if p.a_eq is not None else 0) + n_ub + n_extra
    a = np.zeros((m, n_std))
    b = np.zeros(m)
    c = np.zeros(n_std)

    def emit(mat_rows, vec, row0):
        for j in range(nv):
            kind, s = cols[j]
            col = mat_rows[:, j]
            if kind == "shift":
                a[row0:row0 + mat_rows.shape[0], s] += col
            elif kind == "mirror":
                a[row0:row0 + mat_rows.shape[0], s] -= col
            else:
                a[row0:row0 + mat_rows.shape[0], s] += col
                a[row0:row0 + mat_rows.shape[0], s + 1] -= col
        b[row0:row0 + mat_rows.shape[0]] = vec - mat_rows @ shift

    row = 0
    if p.a_eq is not None and p.a_eq.shape[0]:
        emit(p.a_eq, p.b_eq, row)
        row += p.a_eq.shape[0]
    if n_ub:
        emit(p.a_ub, p.b_ub, row)
        a[row:row + n_ub, std_cols:std_cols + n_ub] = np.eye(n_ub)
        row += n_ub
    for t_i, (j, width) in enumerate(extra_rows):
        _, s = cols[j]
        a[row, s] = 1.0
        a[row, std_cols + n_ub + t_i] = 1.0
        b[row] = width
        row += 1
    for j in range(nv):
        kind, s = cols[j]
        if kind == "shift":
            c[s] = p.obj[j]
        elif kind == "mirror":
            c[s] = -p.obj[j]
        else:
            c[s] = p.obj[j]
            c[s + 1] = -p.obj[j]

    value, xs = _solve_standard(a, b, c)
    x = np.zeros(nv)
    for j in range(nv):
        kind, s = cols[j]
        if kind == "shift":
            x[j] = shift[j] + xs[s]
        elif kind == "mirror":
            x[j] = shift[j] - xs[s]
        else:
            x[j] = xs[s] - xs[s + 1]
    return value + float(p.obj @ shift), x


# --------------------------------------------------------------------------
# the relaxation LP
# --------------------------------------------------------------------------

def build_lp(net: Network, bounds: PreActBounds, x, eps, c) -> LpProblem:
    """Explicit LP over the input box and per-layer ReLU envelopes whose
    optimum is min c^T z_hat_k over the outer polytope."""
    x = as_input(x).ravel()
    c = np.asarray(c, dtype=np.float64).ravel()
    widths = net.widths()
    k = net.k
    span_sets = [np.flatnonzero(bounds.partition.span[i])
                 for i in range(k - 2)]
    nv = widths[0] + sum(widths[1:]) + sum(s.size for s in span_sets)
    if nv > MAX_LP_VARS:
        raise LpSizeError(f"{nv} LP variables exceeds guard {MAX_LP_VARS}")

    sl = {}
    pos_ = 0

    def add_var(name, n):
        nonlocal pos_
        sl[name] = slice(pos_, pos_ + n)
        pos_ += n

    add_var("z1", widths[0])
    for i in range(2, k + 1):
        add_var(f"zhat{i}", widths[i - 1])
    for i in range(2, k):
        add_var(f"zspan{i}", span_sets[i - 2].size)

    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    lb[sl["z1"]] = x - eps
    ub[sl["z1"]] = x + eps

    a_eq_rows, b_eq_rows = [], []
    for i in range(1, k):
        la = net.layers[i - 1]
        w = adjoint_on_basis(la).T
        n_out = widths[i]
        rows = np.zeros((n_out, nv))
        rows[:, sl[f"zhat{i + 1}"]] = np.eye(n_out)
        if i == 1:
            rows[:, sl["z1"]] = -w
        else:
            pos_mask = bounds.partition.pos[i - 2]
            pos_units = np.flatnonzero(pos_mask)
            zh = sl[f"zhat{i}"]
            rows[:, zh.start + pos_units] = -w[:, pos_units]
            span_units = span_sets[i - 2]
            if span_units.size:
                rows[:, sl[f"zspan{i}"]] = -w[:, span_units]
        a_eq_rows.append(rows)
        from .autodiff import val
        b_eq_rows.append(val(la.bias).copy())
    a_eq = np.vstack(a_eq_rows)
    b_eq = np.concatenate(b_eq_rows)

    a_ub_rows, b_ub_rows = [], []
    for i in range(2, k):
        units = span_sets[i - 2]
        li = np.asarray(bounds.lower[i - 2])
        ui = np.asarray(bounds.upper[i - 2])
        for t, j in enumerate(units):
            zsp = sl[f"zspan{i}"].start + t
            zh = sl[f"zhat{i}"].start + j
            r = np.zeros(nv)
            r[zsp] = -1.0                       # z >= 0
            a_ub_rows.append(r)
            b_ub_rows.append(0.0)
            r = np.zeros(nv)
            r[zh], r[zsp] = 1.0, -1.0           # z >= zhat
            a_ub_rows.append(r)
            b_ub_rows.append(0.0)
            r = np.zeros(nv)
            r[zsp] = ui[j] - li[j]              # envelope upper face
            r[zh] = -ui[j]
            a_ub_rows.append(r)
            b_ub_rows.append(-ui[j] * li[j])
    a_ub = np.vstack(a_ub_rows) if a_ub_rows else np.zeros((0, nv))
    b_ub = np.asarray(b_ub_rows)

    obj = np.zeros(nv)
    obj[sl[f"zhat{k}"]] = c
    return LpProblem(obj, a_eq, b_eq, a_ub, b_ub, lb, ub, sl)


def lp_min(net, bounds, x, eps, c):
    value, _ = solve_lp(build_lp(net, bounds, x, eps, c))
    return value


def enumerate_basic_solutions(p: LpProblem):
    """Brute-force LP optimum by enumerating active-constraint vertices;
    only usable for tiny problems."""
    nv = p.obj.size
    rows = [("eq", r, b) for r, b in zip(p.a_eq, p.b_eq)]
    rows += [("ub", r, b) for r, b in zip(p.a_ub, p.b_ub)]
    for j in range(nv):
        e = np.zeros(nv)
        e[j] = 1.0
        if np.isfinite(p.lb[j]):
            rows.append(("ub", -e, -p.lb[j]))
        if np.isfinite(p.ub[j]):
            rows.append(("ub", e, p.ub[j]))
    eqs = [i for i, r in enumerate(rows) if r[0] == "eq"]
    others = [i for i, r in enumerate(rows) if r[0] != "eq"]
    need = nv - len(eqs)
    best = np.inf
    arg = None
    for combo in itertools.combinations(others, need):
        idx = eqs + list(combo)
        a = np.stack([rows[i][1] for i in idx])
        b = np.array([rows[i][2] for i in idx])
        try:
            v = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            continue
        feas = np.all(p.a_ub @ v <= p.b_ub + 1e-9) if p.a_ub.size else True
        feas &= np.all(np.abs(p.a_eq @ v - p.b_eq) <= 1e-9) if p.a_eq.size else True
        feas &= np.all(v >= p.lb - 1e-9) and np.all(v <= p.ub + 1e-9)
        if feas and p.obj @ v < best:
            best = float(p.obj @ v)
            arg = v
    return best, arg


# --------------------------------------------------------------------------
# brute-force polytope sampling & planar geometry
# --------------------------------------------------------------------------

@dataclass
class PolytopeSample:
    deltas: np.ndarray     # (G^d, d) perturbations, ||delta||_inf <= eps
    outputs: np.ndarray    # (G^d, n_out)
    hull: np.ndarray = None  # CCW hull vertices when n_out == 2


def convex_hull_2d(points):
    """Andrew's monotone chain; returns CCW vertices without repeats."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for pt in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], pt) <= 0:
            lower.pop()
        lower.append(pt)
    for pt in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], pt) <= 0:
            upper.pop()
        upper.append(pt)
    return np.asarray(lower[:-1] + upper[:-1])


def polygon_area(vertices):
    """Shoelace area of a simple polygon."""
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_halfplane(poly, normal, offset):
    """Sutherland-Hodgman clip of polygon to {z : normal.z >= offset}."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        da = normal @ a - offset
        db = normal @ b - offset
        if da >= 0:
            out.append(a)
        if (da >= 0) != (db >= 0):
            t = da / (da - db)
            out.append(a + t * (b - a))
    return np.asarray(out) if out else np.zeros((0, 2))


def sample_polytope(net: Network, x, eps, grid_per_dim=201) -> PolytopeSample:
    """Dense grid image of the eps-ball through the network."""
    x = as_input(x).ravel()
    d = x.size
    if d > 3:
        raise ValueError(f"polytope sampling limited to <= 3 input dims, got {d}")
    axes = [np.linspace(-eps, eps, grid_per_dim)] * d
    deltas = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    outputs = net.forward(x + deltas)
    hull = convex_hull_2d(outputs) if net.output_dim == 2 else None
    return PolytopeSample(deltas, outputs, hull)


def outer_polygon(net: Network, x, eps, n_dirs=64, norm=LINF):
    """Polygon enclosing the outer approximation of a 2-output network:
    intersect the halfplanes c.z >= J(c) over a fan of directions."""
    from .dual import dual_bound

    if net.output_dim != 2:
        raise ValueError("outer polygon needs a 2-output network")
    thetas = np.linspace(0.0, 2 * np.pi, n_dirs, endpoint=False)
    cs = np.stack([np.cos(thetas), np.sin(thetas)])
    j = dual_bound(net, x, eps, cs, norm=norm)
    big = 1.0 + np.max(np.abs(j)) * 4
    poly = np.array([[-big, -big], [big, -big], [big, big], [-big, big]])
    for t in range(n_dirs):
        poly = clip_halfplane(poly, cs[:, t], j[t])
        if len(poly) == 0:
            break
    return poly, cs.T, j


def tightness_report(net: Network, xs, eps, targets, norm=LINF):
    """Rows of (example, target, dual J, LP optimum, gap) plus summary."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets.reshape(1, -1)
    rows = []
    for idx, x in enumerate(np.atleast_2d(xs)):
        bounds = compute_bounds(net, x, eps, norm=norm)
        dv = dual_backward(net, bounds, targets.T)
        j = dual_objective(x, eps, dv, bounds, norm=norm)
        for t in range(targets.shape[0]):
            lp = lp_min(net, bounds, x, eps, targets[t])
            rows.append((idx, t, float(j[t]), float(lp), float(lp - j[t])))
    gaps = np.array([r[4] for r in rows])
    summary = {"mean_gap": float(gaps.mean()), "max_gap": float(gaps.max()),
               "min_gap": float(gaps.min()), "n": len(rows)}
    return rows, summary
