"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps a float64 ndarray and records enough of the computation
graph to run a vector-Jacobian backward pass.  Only the handful of
operations the bound/dual computations need are implemented; big-array
steps (norm reductions, row gathers, segment sums) get fused nodes so the
tape never stores avoidable intermediates.

Gradients only flow into leaves created with ``requires_grad=True``;
subgraphs that cannot reach such a leaf are not recorded at all, and the
``no_grad()`` context disables recording entirely.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the ``with`` block (per thread)."""
    prev = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Node in the computation graph; `value` is always a float64 ndarray."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, _parents=(), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self, seed=None):
        """Accumulate gradients of self (seeded with `seed`, default ones)
        into every reachable leaf with ``requires_grad=True``."""
        topo: list[Var] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p is not None:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.value)
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(topo):
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if parent is None or g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g), parent.value.shape)
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None else g
                else:
                    parent.grad = parent.grad + g


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def val(x) -> np.ndarray:
    """Underlying ndarray of a Var, or the input coerced to float64."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _node(value, parents, vjp) -> Var:
    """Create an op result; skips recording when grads cannot flow.

    `parents` keeps positional alignment with the vjp's gradient tuple;
    non-Var operands become None placeholders.
    """
    parents = tuple(p if isinstance(p, Var) else None for p in parents)
    if _grad_enabled() and any(
            p is not None and p.requires_grad for p in parents):
        return Var(value, requires_grad=True, _parents=parents, _vjp=vjp)
    return Var(value)


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b):
    av, bv = val(a), val(b)
    return _node(av + bv, (a, b), lambda g: (g, g))


def sub(a, b):
    av, bv = val(a), val(b)
    return _node(av - bv, (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = val(a), val(b)
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    av, bv = val(a), val(b)
    out = av / bv
    return _node(out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a):
    return _node(-val(a), (a,), lambda g: (-g,))


def relu(a):
    av = val(a)
    return _node(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


def sqrt(a):
    out = np.sqrt(val(a))
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b):
    av, bv = val(a), val(b)
    out = np.matmul(av, bv)

    def vjp(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim > 1 else g * bv
            gb = np.matmul(np.swapaxes(av, -1, -2), g) if av.ndim > 1 else av * g
        elif av.ndim == 1:
            ga = np.matmul(bv, g)
            gb = np.multiply.outer(av, g)
        else:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return ga, gb

    return _node(out, (a, b), vjp)


def transpose(a, axes=None):
    av = val(a)
    out = np.transpose(av, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    av = val(a)
    return _node(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def concat_rows(parts):
    vals = [val(p) for p in parts]
    sizes = [v.shape[0] for v in vals]
    offs = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(vals)))

    return _node(np.concatenate(vals, axis=0), tuple(parts), vjp)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def asum(a, axis=None, keepdims=False):
    av = val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _node(out, (a,), vjp)


def amean(a, axis=None):
    av = val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(asum(a, axis=axis), 1.0 / n)


def l1norm(a, axis):
    """sum(|a|, axis); fused so the |a| intermediate is never stored."""
    av = val(a)
    out = np.abs(av).sum(axis=axis)
    return _node(out, (a,), lambda g: (np.expand_dims(g, axis) * np.sign(av),))


def l2norm(a, axis):
    """sqrt(sum(a^2, axis)) with zero subgradient at the origin."""
    av = val(a)
    out = np.sqrt((av * av).sum(axis=axis))

    def vjp(g):
        denom = np.where(out == 0.0, 1.0, out)
        return (np.expand_dims(g / denom, axis) * av,)

    return _node(out, (a,), vjp)


# --------------------------------------------------------------------------
# indexing
# --------------------------------------------------------------------------

def gather_rows(a, idx, group_counts=None):
    """a[idx] for a 2-D `a` and integer row indices (repeats allowed).

    With `group_counts`, consecutive index groups are promised to have no
    internal repeats, so the scatter-back runs as one fancy add per group.
    """
    av = val(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(av)
        if group_counts is not None:
            lo = 0
            for cnt in group_counts:
                hi = lo + cnt
                out[idx[lo:hi]] += g[lo:hi]
                lo = hi
        elif g.size > 1_000_000:
            # sort + segment-reduce beats ufunc.at by a wide margin here
            order = np.argsort(idx, kind="stable")
            si = idx[order]
            starts = np.concatenate(
                [[0], np.flatnonzero(np.diff(si)) + 1])
            out[si[starts]] = np.add.reduceat(g[order], starts, axis=0)
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(av[idx], (a,), vjp)


def take_flat(a, flat_idx):
    """a.ravel()[flat_idx] (repeats allowed)."""
    av = val(a)
    flat_idx = np.asarray(flat_idx, dtype=np.intp)

    def vjp(g):
        acc = np.bincount(flat_idx, weights=g, minlength=av.size)
        return (acc.reshape(av.shape),)

    return _node(av.ravel()[flat_idx], (a,), vjp)


def scatter_flat(vals, flat_idx, shape):
    """Dense array of `shape` with `vals` placed at unique flat positions."""
    flat_idx = np.asarray(flat_idx, dtype=np.intp)
    vv = val(vals)
    out = np.zeros(shape, dtype=np.float64)
    out.ravel()[flat_idx] = vv
    return _node(out, (vals,), lambda g: (g.ravel()[flat_idx],))


def scale_rows_by_owner(a, d, owner):
    """a * d[owner] for 2-D `a`; rows must be grouped contiguously by owner.

    `owner[r]` names the row of `d` that scales row r of `a`.  Fused so the
    gathered copy of `d` is rebuilt (not stored) during the backward pass.
    """
    av, dv = val(a), val(d)
    owner = np.asarray(owner, dtype=np.intp)

    def vjp(g):
        ga = g * dv[owner]
        gd = _segment_sum_value(g * av, owner, dv.shape[0])
        return ga, gd

    return _node(av * dv[owner], (a, d), vjp)


def _segment_sum_value(x, owner, nseg):
    counts = np.bincount(owner, minlength=nseg)
    ends = np.cumsum(counts)
    starts = ends - counts
    zero = np.zeros((1,) + x.shape[1:])
    cs = np.concatenate([zero, np.cumsum(x, axis=0)], axis=0)
    return cs[ends] - cs[starts]


def ragged_bmm(a, b3, owner):
    """Per-owner matmul: rows of `a` grouped contiguously by owner hit that
    owner's (k, n) slice of `b3` (B, k, n)."""
    av, bv = val(a), val(b3)
    owner = np.asarray(owner, dtype=np.intp)
    counts = np.bincount(owner, minlength=bv.shape[0])
    ends = np.cumsum(counts)
    starts = ends - counts
    out = np.empty((av.shape[0], bv.shape[2]))
    for e in range(bv.shape[0]):
        if counts[e]:
            np.matmul(av[starts[e]:ends[e]], bv[e], out=out[starts[e]:ends[e]])

    def vjp(g):
        ga = np.empty_like(av)
        gb = np.zeros_like(bv)
        for e in range(bv.shape[0]):
            if counts[e]:
                sl = slice(starts[e], ends[e])
                np.matmul(g[sl], bv[e].T, out=ga[sl])
                np.matmul(av[sl].T, g[sl], out=gb[e])
        return ga, gb

    return _node(out, (a, b3), vjp)


def segment_sum(a, owner, nseg):
    """Per-owner row sums of 2-D `a`; rows grouped contiguously by owner."""
    av = val(a)
    owner = np.asarray(owner, dtype=np.intp)
    counts = np.bincount(owner, minlength=nseg)

    def vjp(g):
        return (np.repeat(g, counts, axis=0),)

    return _node(_segment_sum_value(av, owner, nseg), (a,), vjp)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def cross_entropy_mean(logits, labels):
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    lv = val(logits)
    labels = np.asarray(labels, dtype=np.intp)
    m = lv.max(axis=1, keepdims=True)
    ex = np.exp(lv - m)
    z = ex.sum(axis=1, keepdims=True)
    lse = (m + np.log(z)).ravel()
    out = np.mean(lse - lv[np.arange(lv.shape[0]), labels])

    def vjp(g):
        p = ex / z
        p[np.arange(lv.shape[0]), labels] -= 1.0
        return (g * p / lv.shape[0],)

    return _node(out, (logits,), vjp)
