"""Layer-by-layer pre-activation bounds via incremental dual passes.

The tight bounds come from evaluating the dual objective for c = +/-I at
every layer, maintained incrementally in matrix form: a basis matrix
nu_hat_1, one ragged row-block per earlier layer's zero-spanning
activations, and bias accumulators.  Rows for a whole batch of examples
are stacked so each propagation step is a single matmul / conv apply.

The naive layerwise interval propagation is kept alongside as the loose
baseline it is compared against.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, val
from .dual import LINF, DualNorm, IndexPartition, _span_coef, classify
from .linops import Network, ShapeMismatch, as_input, shared_scale_conv


@dataclass
class PreActBounds:
    """Bounds l_i <= z_hat_i <= u_i for i = 2..k, plus the index partition
    for the hidden layers.  Arrays are (n_i,) for a single example or
    (B, n_i) when computed for a batch."""

    lower: list
    upper: list
    partition: IndexPartition
    eps: float
    norm: DualNorm

    @property
    def batched(self):
        return np.asarray(self.lower[0]).ndim == 2

    def example(self, b: int) -> "PreActBounds":
        """Single-example view of batched bounds."""
        part = IndexPartition([m[b] for m in self.partition.neg],
                              [m[b] for m in self.partition.pos],
                              [m[b] for m in self.partition.span])
        return PreActBounds([l[b] for l in self.lower],
                            [u[b] for u in self.upper], part, self.eps,
                            self.norm)


@dataclass
class BoundPropState:
    """Final incremental matrices of the bound pass (for inspection)."""

    nu_hat_1: np.ndarray = None
    nu_blocks: dict = field(default_factory=dict)
    gammas: list = field(default_factory=list)
    psis: list = field(default_factory=list)


@dataclass
class PassStats:
    """Row counts pushed through the affine operators during one pass."""

    basis_rows: int = 0
    block_rows: int = 0
    aux_rows: int = 0


class _Block:
    __slots__ = ("mat", "owner", "flat", "units", "d_sel", "l_sel", "layer")

    def __init__(self, owner, flat, units, d_sel, l_sel, layer, mat=None):
        self.mat = mat          # None while the block is still lazy
        self.owner = owner
        self.flat = flat
        self.units = units
        self.d_sel = d_sel
        self.l_sel = l_sel
        self.layer = layer


@dataclass
class _BoundVars:
    """Var-level result of the bound pass, reusable inside a larger graph."""

    lvars: list
    uvars: list
    parts: list
    dspans: list
    state: BoundPropState
    stats: PassStats


def _colnorm(w: Var, q: int) -> Var:
    return ad.l1norm(w, axis=0) if q == 1 else ad.l2norm(w, axis=0)


def bound_pass_vars(net: Network, x_rows, eps, norm: DualNorm = LINF,
                    capture_state: bool = False,
                    skip_last: bool = False) -> _BoundVars:
    """Differentiable batched bound pass; `eps` may be a Var.

    The basis matrix nu_hat_1 starts out shared (W_1^T for every example)
    and is pushed through its first propagation with fused kernels; new
    span-row blocks contribute to the current layer's bounds through
    relu(+/-W_i^T) directly and are only materialized once they must
    propagate further.
    """
    x_rows = np.asarray(x_rows, dtype=np.float64)
    if x_rows.ndim != 2 or x_rows.shape[1] != net.input_dim:
        raise ShapeMismatch(
            f"layer 0: input rows have width "
            f"{x_rows.shape[-1] if x_rows.ndim else 0}, expected "
            f"{net.input_dim}")
    if float(val(eps)) < 0:
        raise ValueError(f"eps must be non-negative, got {float(val(eps))}")
    bsz = x_rows.shape[0]
    layers = net.layers
    k = net.k
    stats = PassStats()
    state = BoundPropState() if capture_state else None
    rownorm = ad.l1norm if norm.q == 1 else ad.l2norm

    wt1 = layers[0].t_matrix()
    n1 = val(wt1).shape[0]
    xnu = layers[0].apply_rows(x_rows)
    z = xnu + layers[0].bias
    w1n = _colnorm(wt1, norm.q)
    lvars = [z - eps * w1n]
    uvars = [z + eps * w1n]
    parts, dspans = [], []

    nu1 = wt1               # 2-D while shared, (B, n1, n_cur) afterwards
    gammas = [ad.reshape(layers[0].bias, (1, -1))]
    blocks: list[_Block] = []
    pending: _Block = None
    prev_wt = wt1

    for i in range(2, k):
        la = layers[i - 1]
        li, ui = lvars[-1], uvars[-1]
        width = val(li).shape[1]
        part = classify(val(li), val(ui))
        neg_m, pos_m, span_m = part
        parts.append(part)
        dspan = _span_coef(li, ui, span_m)
        dspans.append(dspan)
        if skip_last and i == k - 1:
            # caller only needs hidden-layer partitions; the final interval
            # (and everything feeding it) can be skipped
            break
        d = dspan + pos_m.astype(np.float64)
        wt_i = la.t_matrix()
        conv = la.kind == "conv2d"
        a_mat = None
        if not conv:
            # (D_i W_i^T) per example, reused by every propagation below
            a_mat = ad.reshape(wt_i, (1, width, la.output_dim)) \
                * ad.reshape(d, (bsz, width, 1))

        # propagate existing explicit blocks through D_i W_i^T
        for blk in blocks:
            scaled = ad.scale_rows_by_owner(blk.mat, d, blk.owner)
            blk.mat = la.apply_rows(scaled)
            stats.block_rows += val(blk.mat).shape[0]

        # materialize the block deferred at the previous layer; the gather
        # lands after the current propagation, so its rows come out already
        # pushed through D_i W_i^T
        if pending is not None:
            counts = np.bincount(pending.owner, minlength=bsz)
            rows = ad.gather_rows(prev_wt, pending.units,
                                  group_counts=counts)
            if conv:
                rows = ad.scale_rows_by_owner(rows, d, pending.owner)
                rows = la.apply_rows(rows)
            else:
                rows = ad.ragged_bmm(rows, a_mat, pending.owner)
            pending.mat = rows * ad.reshape(pending.d_sel, (-1, 1))
            stats.block_rows += len(pending.units)
            blocks.append(pending)
            pending = None

        # defer this layer's new block (scaled rows of W_i^T)
        flat = np.flatnonzero(span_m)
        if flat.size:
            owner, unit = np.divmod(flat, width)
            pending = _Block(owner, flat, unit, ad.take_flat(dspan, flat),
                             ad.take_flat(li, flat), i)

        # bias accumulators and the x^T nu_hat_1 row
        gammas = [la.apply_rows(g * d) for g in gammas]
        stats.aux_rows += len(gammas) * bsz + bsz
        gammas.append(ad.reshape(la.bias, (1, -1)))
        xnu = la.apply_rows(xnu * d)

        # basis matrix
        if isinstance(val(nu1), np.ndarray) and val(nu1).ndim == 2:
            if conv:
                nu1 = shared_scale_conv(nu1, d, la)
            else:
                nu1 = ad.matmul(nu1, a_mat)
        else:
            if conv:
                nu1 = nu1 * ad.reshape(d, (bsz, 1, width))
                nu1 = ad.reshape(
                    la.apply_rows(ad.reshape(nu1, (bsz * n1, width))),
                    (bsz, n1, la.output_dim))
            else:
                nu1 = ad.matmul(nu1, a_mat)
        stats.basis_rows += bsz * n1

        psi = xnu
        for g in gammas:
            psi = psi + g
        pen = eps * rownorm(nu1, axis=1)
        low, high = psi - pen, psi + pen
        for blk in blocks:
            weighted_lo = ad.relu(ad.neg(blk.mat)) * ad.reshape(
                blk.l_sel, (-1, 1))
            weighted_hi = ad.relu(blk.mat) * ad.reshape(blk.l_sel, (-1, 1))
            low = low + ad.segment_sum(weighted_lo, blk.owner, bsz)
            high = high - ad.segment_sum(weighted_hi, blk.owner, bsz)
        if pending is not None:
            # fresh block rows are d_sel * W_i^T[unit], so relu factors out
            w_ld = ad.scatter_flat(pending.l_sel * pending.d_sel,
                                   pending.flat, (bsz, width))
            low = low + ad.matmul(w_ld, ad.relu(ad.neg(wt_i)))
            high = high - ad.matmul(w_ld, ad.relu(wt_i))
        lvars.append(low)
        uvars.append(high)
        prev_wt = wt_i
        if capture_state:
            state.psis.append(val(psi))

    if capture_state:
        state.nu_hat_1 = val(nu1) if val(nu1).ndim == 3 else \
            np.broadcast_to(val(nu1), (bsz,) + val(nu1).shape).copy()
        state.nu_blocks = {blk.layer: val(blk.mat) for blk in blocks}
        if pending is not None:
            srows = val(prev_wt)[pending.units] \
                * val(pending.d_sel)[:, None]
            state.nu_blocks[pending.layer] = srows
        state.gammas = [val(g) for g in gammas]
    return _BoundVars(lvars, uvars, parts, dspans, state, stats)


def _pack(bv: _BoundVars, eps, norm, squeeze) -> PreActBounds:
    lows = [val(l)[0] if squeeze else val(l) for l in bv.lvars]
    highs = [val(u)[0] if squeeze else val(u) for u in bv.uvars]
    part = IndexPartition(
        [(p[0][0] if squeeze else p[0]) for p in bv.parts],
        [(p[1][0] if squeeze else p[1]) for p in bv.parts],
        [(p[2][0] if squeeze else p[2]) for p in bv.parts])
    return PreActBounds(lows, highs, part, float(val(eps)), norm)


def compute_bounds(net: Network, x, eps, norm: DualNorm = LINF,
                   capture_state: bool = False, stats_out: PassStats = None):
    """Pre-activation bounds for one input (or a batch) at radius eps."""
    arr = as_input(x)
    single = arr.ndim == 1
    rows = arr.reshape(1, -1) if single else arr
    with ad.no_grad():
        bv = bound_pass_vars(net, rows, float(eps), norm=norm,
                             capture_state=capture_state)
    if stats_out is not None:
        stats_out.basis_rows = bv.stats.basis_rows
        stats_out.block_rows = bv.stats.block_rows
        stats_out.aux_rows = bv.stats.aux_rows
    bounds = _pack(bv, eps, norm, squeeze=single)
    if capture_state:
        return bounds, bv.state
    return bounds


def naive_layerwise_bounds(net: Network, x, eps,
                           norm: DualNorm = LINF) -> PreActBounds:
    """Loose baseline: propagate each layer's interval as a free box."""
    arr = as_input(x)
    single = arr.ndim == 1
    rows = arr.reshape(1, -1) if single else arr
    if float(eps) < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    with ad.no_grad():
        la = net.layers[0]
        z = val(la.apply_rows(rows)) + val(la.bias)
        wn = val(_colnorm(la.t_matrix(), norm.q))
        lows, highs = [z - eps * wn], [z + eps * wn]
        for la in net.layers[1:]:
            zlo = np.maximum(lows[-1], 0.0)
            zhi = np.maximum(highs[-1], 0.0)
            wt = val(la.t_matrix())
            wpos, wneg = np.maximum(wt, 0.0), np.minimum(wt, 0.0)
            b = val(la.bias)
            lows.append(zlo @ wpos + zhi @ wneg + b)
            highs.append(zhi @ wpos + zlo @ wneg + b)
    part = IndexPartition.from_bounds(
        [(l[0] if single else l) for l in lows[:-1]],
        [(u[0] if single else u) for u in highs[:-1]])
    return PreActBounds([l[0] if single else l for l in lows],
                        [u[0] if single else u for u in highs],
                        part, float(eps), norm)


def index_set_stats(bounds: PreActBounds):
    """Per hidden layer: fractions of activations in (I-, I+, I)."""
    out = []
    for i in range(bounds.partition.n_hidden):
        neg = np.asarray(bounds.partition.neg[i], dtype=float)
        pos = np.asarray(bounds.partition.pos[i], dtype=float)
        span = np.asarray(bounds.partition.span[i], dtype=float)
        out.append((float(neg.mean()), float(pos.mean()), float(span.mean())))
    return out
