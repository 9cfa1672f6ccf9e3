"""The dual feasible network and its objective J.

Running one modified backward pass through the network for an objective
matrix c yields dual variables whose objective value lower-bounds
min c^T z over the convex outer approximation of the reachable outputs,
for any choice of the per-activation slope alpha in [0, 1].  The default
slope u/(u-l) makes the pass linear and is never worse in practice.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, val
from .linops import Network, ShapeMismatch, as_input

_DEGENERATE_WIDTH = 1e-12


@dataclass(frozen=True)
class DualNorm:
    """Penalty norm exponent q for the eps term: q=1 certifies l-inf balls,
    q=2 certifies l2 balls."""

    q: int = 1

    def __post_init__(self):
        if self.q not in (1, 2):
            raise ValueError(f"dual norm exponent must be 1 or 2, got {self.q}")

    @classmethod
    def from_name(cls, name: str) -> "DualNorm":
        try:
            return cls({"linf": 1, "l2": 2}[name])
        except KeyError:
            raise ValueError(f"unknown norm {name!r}; pick 'linf' or 'l2'")

    @property
    def name(self):
        return "linf" if self.q == 1 else "l2"


LINF = DualNorm(1)
L2 = DualNorm(2)


def classify(lower, upper):
    """Partition activations into (neg, pos, span) boolean masks.

    Boundary rules: u == 0 goes negative, l == 0 goes positive, and a
    sliver with u - l below 1e-12 that still straddles zero is treated as
    fixed negative so u/(u-l) is never formed on a near-singular width.
    """
    lower = np.asarray(lower)
    upper = np.asarray(upper)
    neg = (upper <= 0.0) | ((lower < 0.0) & (upper - lower < _DEGENERATE_WIDTH))
    pos = ~neg & (lower >= 0.0)
    span = ~(neg | pos)
    return neg, pos, span


@dataclass
class IndexPartition:
    """Disjoint neg/pos/span masks for each hidden layer (i = 2..k-1)."""

    neg: list
    pos: list
    span: list

    @classmethod
    def from_bounds(cls, lowers, uppers) -> "IndexPartition":
        triples = [classify(l, u) for l, u in zip(lowers, uppers)]
        return cls([t[0] for t in triples], [t[1] for t in triples],
                   [t[2] for t in triples])

    @property
    def n_hidden(self):
        return len(self.neg)

    def counts(self, i):
        """(|I-|, |I+|, |I|) for hidden layer index i (0-based)."""
        return (int(self.neg[i].sum()), int(self.pos[i].sum()),
                int(self.span[i].sum()))


@dataclass
class DualVars:
    """Backward-pass variables, one column per objective vector c.

    nu_hat[i] is the pre-activation dual variable entering affine layer
    i+1 (so nu_hat[0] is nu_hat_1), nu[i] the post-partition variable of
    pre-activation layer i+2, and nu[-1] equals -c.  bias_term caches
    -sum_i nu_{i+1}^T b_i, the only piece of J that needs the biases.
    """

    nu_hat: list = field(default_factory=list)
    nu: list = field(default_factory=list)
    bias_term: np.ndarray = None


def _span_coef(l_v: Var, u_v: Var, span_mask) -> Var:
    """u/(u-l) on span entries, scattered into a zero full-width array."""
    shape = val(l_v).shape
    flat = np.flatnonzero(span_mask)
    if flat.size == 0:
        return Var(np.zeros(shape))
    l_sel = ad.take_flat(l_v, flat)
    u_sel = ad.take_flat(u_v, flat)
    return ad.scatter_flat(u_sel / (u_sel - l_sel), flat, shape)


def dual_rows(net: Network, c_rows, owner, lvars, uvars, parts, x_rows, eps,
              norm: DualNorm, alpha_override=None, dspans=None):
    """Row-stack dual pass: row r of `c_rows` is one objective vector
    c^T for the example `owner[r]`; rows must be grouped by owner.

    lvars/uvars are per-hidden-layer (B, n_i) bound Vars, `parts` the
    matching (neg, pos, span) masks, x_rows the (B, n_input) inputs.
    Returns (J_rows Var, nu_hat list, nu list) in row-stack form.
    """
    layers = net.layers
    k = net.k
    owner = np.asarray(owner, dtype=np.intp)
    nu = [None] * (k + 1)          # nu[i] for pre-activation layer i
    nu_hat = [None] * k            # nu_hat[i] enters affine layer i
    nu[k] = ad.neg(c_rows) if isinstance(c_rows, Var) else Var(-np.asarray(c_rows, dtype=float))
    bias_term = Var(np.zeros(val(nu[k]).shape[0]))
    for i in range(k - 1, 0, -1):
        la = layers[i - 1]
        bias_term = bias_term - ad.asum(nu[i + 1] * la.bias, axis=1)
        nu_hat[i] = la.apply_rows_t(nu[i + 1])
        if i >= 2:
            neg_m, pos_m, span_m = parts[i - 2]
            pos_rows = pos_m[owner]
            span_rows = span_m[owner]
            if not span_rows.any():
                nu[i] = nu_hat[i] * pos_rows
                continue
            coef = dspans[i - 2] if dspans is not None else \
                _span_coef(lvars[i - 2], uvars[i - 2], span_m)
            up = ad.scale_rows_by_owner(ad.relu(nu_hat[i]) * span_rows,
                                        coef, owner)
            if alpha_override is None:
                down = ad.scale_rows_by_owner(
                    ad.relu(ad.neg(nu_hat[i])) * span_rows, coef, owner)
            else:
                alpha = np.asarray(alpha_override[i - 2], dtype=float)
                down = ad.relu(ad.neg(nu_hat[i])) * span_rows * alpha[owner]
            nu[i] = nu_hat[i] * pos_rows + up - down
    j_rows = bias_term \
        - ad.asum(nu_hat[1] * np.asarray(x_rows)[owner], axis=1)
    normfn = ad.l1norm if norm.q == 1 else ad.l2norm
    j_rows = j_rows - eps * normfn(nu_hat[1], axis=1)
    for i in range(2, k):
        span_rows = parts[i - 2][2][owner]
        if span_rows.any():
            j_rows = j_rows + ad.asum(
                ad.scale_rows_by_owner(ad.relu(nu[i]) * span_rows,
                                       lvars[i - 2], owner), axis=1)
    return j_rows, nu_hat, nu


def _check_alpha(net, alpha_override):
    if alpha_override is None:
        return None
    if len(alpha_override) != net.k - 2:
        raise ShapeMismatch(
            f"alpha override needs {net.k - 2} per-hidden-layer arrays, "
            f"got {len(alpha_override)}")
    out = []
    for i, a in enumerate(alpha_override):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (net.layers[i].output_dim,):
            raise ShapeMismatch(
                f"alpha override for hidden layer {i} has shape {a.shape}")
        if np.any(a < 0.0) or np.any(a > 1.0):
            raise ValueError("alpha override values must lie in [0, 1]")
        out.append(a.reshape(1, -1))
    return out


def _check_bounds_match(net: Network, bounds):
    widths = net.widths()[1:]
    if len(bounds.lower) != len(widths):
        raise ShapeMismatch(
            f"bounds carry {len(bounds.lower)} layers, network has "
            f"{len(widths)}")
    for i, (l, w) in enumerate(zip(bounds.lower, widths)):
        if np.asarray(l).shape[-1] != w:
            raise ShapeMismatch(
                f"bounds layer {i} width {np.asarray(l).shape[-1]} != "
                f"network width {w}")


def dual_backward(net: Network, bounds, c, alpha_override=None) -> DualVars:
    """One modified backward pass for objective matrix `c` (one objective
    per column) against precomputed single-example bounds."""
    _check_bounds_match(net, bounds)
    alpha = _check_alpha(net, alpha_override)
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        c = c.reshape(-1, 1)
    if c.shape[0] != net.output_dim:
        raise ShapeMismatch(
            f"objective matrix has {c.shape[0]} rows, network outputs "
            f"{net.output_dim}")
    m = c.shape[1]
    parts = [(bounds.partition.neg[i].reshape(1, -1),
              bounds.partition.pos[i].reshape(1, -1),
              bounds.partition.span[i].reshape(1, -1))
             for i in range(bounds.partition.n_hidden)]
    lvars = [Var(np.asarray(l).reshape(1, -1)) for l in bounds.lower[:-1]]
    uvars = [Var(np.asarray(u).reshape(1, -1)) for u in bounds.upper[:-1]]
    with ad.no_grad():
        j_rows, nu_hat, nu = dual_rows(
            net, c.T, np.zeros(m, dtype=np.intp), lvars, uvars, parts,
            np.zeros((1, net.input_dim)), 0.0, LINF, alpha_override=alpha)
    dv = DualVars()
    dv.nu_hat = [val(h).T for h in nu_hat[1:]]
    dv.nu = [val(nu[i]).T for i in range(2, net.k + 1)]
    # recover the cached bias term: J above was evaluated with x=0, eps=0,
    # so it equals bias_term + sum of the span ell terms; recompute directly
    bias_term = np.zeros(m)
    for i in range(1, net.k):
        bias_term -= dv.nu[i - 1].T @ val(net.layers[i - 1].bias)
    dv.bias_term = bias_term
    return dv


def dual_objective(x, eps, dv: DualVars, bounds, norm: DualNorm = LINF):
    """J for each objective column of a precomputed dual pass."""
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    x = as_input(x).ravel()
    nu_hat_1 = dv.nu_hat[0]
    if norm.q == 1:
        pen = np.abs(nu_hat_1).sum(axis=0)
    else:
        pen = np.sqrt((nu_hat_1 ** 2).sum(axis=0))
    j = dv.bias_term - x @ nu_hat_1 - eps * pen
    for i in range(len(bounds.partition.span)):
        span = bounds.partition.span[i]
        if span.any():
            l_span = np.asarray(bounds.lower[i])[span]
            j = j + l_span @ np.maximum(dv.nu[i][span, :], 0.0)
    return j


def dual_bound(net: Network, x, eps, c, norm: DualNorm = LINF):
    """Certified lower bound on min c^T z_hat_k over the eps-ball outer
    polytope: compute bounds, run the dual pass, evaluate J."""
    from .bounds import compute_bounds

    bounds = compute_bounds(net, x, eps, norm=norm)
    dv = dual_backward(net, bounds, c)
    return dual_objective(x, eps, dv, bounds, norm=norm)
