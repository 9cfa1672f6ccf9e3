"""Affine layers (dense and strided 2-D convolution) as linear operators.

Every layer exposes three views of the same operator W:

* ``apply_rows(V)``    -- V @ W^T, i.e. the forward map applied to each row;
* ``apply_rows_t(V)``  -- V @ W, the exact adjoint applied to each row;
* ``t_matrix()``       -- W^T materialized as a dense (in_dim, out_dim) matrix.

Convolutions never materialize W for the row applications: the forward map
is an im2col gather plus one matmul, and the adjoint runs as a stride-1
convolution of the zero-dilated input with the flipped kernel, so both
directions stay BLAS-bound.  Flattened conv vectors are channel-major then
row-major spatial (index = ch*H*W + y*W + x).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, val

# rows per im2col slab are chosen so a slab stays near this many floats
_SLAB_BUDGET = 24_000_000


class ShapeMismatch(ValueError):
    """Input/operator dimension disagreement; message names the layer."""


class ModelFormatError(ValueError):
    """Malformed or internally inconsistent serialized model."""


@dataclass(frozen=True)
class Tensor:
    """Dense float64 value: `shape` extents plus row-major flat `data`."""

    shape: tuple
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64).ravel()
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "data", data)
        if any(s < 0 for s in self.shape):
            raise ValueError(f"negative extent in shape {self.shape}")
        n = int(np.prod(self.shape)) if self.shape else 1
        if data.size != n:
            raise ValueError(f"data length {data.size} != prod(shape)={n}")
        if not np.all(np.isfinite(data)):
            raise ValueError("tensor data contains NaN/Inf")

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.shape, arr.ravel())

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


def as_input(x) -> np.ndarray:
    """Coerce Tensor / array-like to a finite float64 ndarray."""
    arr = x.array() if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("input contains NaN/Inf")
    return arr


# --------------------------------------------------------------------------
# dense layer
# --------------------------------------------------------------------------

class DenseLayer:
    kind = "dense"

    def __init__(self, weight, bias):
        w = np.asarray(weight, dtype=np.float64)
        b = np.asarray(bias, dtype=np.float64)
        if w.ndim != 2:
            raise ModelFormatError("dense weight must be a 2-D matrix")
        if b.shape != (w.shape[0],):
            raise ModelFormatError(
                f"dense bias length {b.shape} does not match out dim {w.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ModelFormatError("dense layer has non-finite parameters")
        self.weight = Var(w, requires_grad=True)
        self.bias = Var(b, requires_grad=True)
        self.output_dim, self.input_dim = w.shape

    def apply_rows(self, v):
        return ad.matmul(v, ad.transpose(self.weight))

    def apply_rows_t(self, v):
        return ad.matmul(v, self.weight)

    def t_matrix(self):
        return ad.transpose(self.weight)

    def params(self):
        return [self.weight, self.bias]

    def to_record(self):
        return {
            "kind": "dense",
            "in": self.input_dim,
            "out": self.output_dim,
            "weight": self.weight.value.ravel().tolist(),
            "bias": self.bias.value.tolist(),
        }


# --------------------------------------------------------------------------
# conv layer
# --------------------------------------------------------------------------

class _ConvGeom:
    """Precomputed gather indices for one conv geometry.

    Out-of-range taps point at a sentinel column holding zero, so padding
    and dropped border pixels need no special cases in the hot path.
    """

    def __init__(self, in_ch, out_ch, kh, kw, stride, pad, in_h, in_w):
        s = stride
        self.in_ch, self.out_ch, self.kh, self.kw = in_ch, out_ch, kh, kw
        self.stride, self.pad, self.in_h, self.in_w = s, pad, in_h, in_w
        self.out_h = (in_h + 2 * pad - kh) // s + 1
        self.out_w = (in_w + 2 * pad - kw) // s + 1
        if self.out_h < 1 or self.out_w < 1:
            raise ModelFormatError("conv kernel larger than padded input")
        self.n_in = in_ch * in_h * in_w
        self.n_out = out_ch * self.out_h * self.out_w
        self.P = self.out_h * self.out_w
        self.Q = in_ch * kh * kw

        # forward im2col: (P, Q) indices into flat input + sentinel n_in
        oy, ox = np.divmod(np.arange(self.P), self.out_w)
        ic, rem = np.divmod(np.arange(self.Q), kh * kw)
        ky, kx = np.divmod(rem, kw)
        iy = oy[:, None] * s - pad + ky[None, :]
        ix = ox[:, None] * s - pad + kx[None, :]
        ok = (iy >= 0) & (iy < in_h) & (ix >= 0) & (ix < in_w)
        self.fwd_idx = np.where(
            ok, ic[None, :] * (in_h * in_w) + iy * in_w + ix, self.n_in)

        # adjoint in polyphase form: input positions split by residue class
        # (iy % s, ix % s); within a class the live kernel taps are fixed, so
        # each class is one small gather + matmul on the undilated output
        self.adj_classes = []
        for ry in range(min(s, in_h)):
            kys = np.array([ky for ky in range(kh) if (ry + pad - ky) % s == 0])
            for rx in range(min(s, in_w)):
                kxs = np.array(
                    [kx for kx in range(kw) if (rx + pad - kx) % s == 0])
                iy = np.arange(ry, in_h, s)
                ix = np.arange(rx, in_w, s)
                if iy.size == 0 or ix.size == 0 or not (kys.size and kxs.size):
                    continue
                # positions (flat, spatial only) this class owns
                pos = (iy[:, None] * in_w + ix[None, :]).ravel()
                # taps: (out_ch, ky in kys, kx in kxs)
                ocs = np.arange(out_ch)
                tap_oc = np.repeat(ocs, kys.size * kxs.size)
                tap_ky = np.tile(np.repeat(kys, kxs.size), out_ch)
                tap_kx = np.tile(np.tile(kxs, kys.size), out_ch)
                oy = (iy[:, None] + pad - tap_ky[None, :]) // s
                ox = (ix[:, None] + pad - tap_kx[None, :]) // s
                ok_y = (oy >= 0) & (oy < self.out_h)
                ok_x = (ox >= 0) & (ox < self.out_w)
                # gather index (n_pos, n_taps) into flat output + sentinel
                giy = np.where(ok_y, oy, 0)
                gix = np.where(ok_x, ox, 0)
                idx = (tap_oc[None, None, :] * self.P
                       + giy[:, None, :] * self.out_w + gix[None, :, :])
                idx = np.where(ok_y[:, None, :] & ok_x[None, :, :],
                               idx, self.n_out).reshape(pos.size, -1)
                # kernel slice (in_ch, n_taps)
                kslice = (tap_oc[:, None] * (in_ch * kh * kw)
                          + np.arange(in_ch)[None, :] * (kh * kw)
                          + tap_ky[:, None] * kw + tap_kx[:, None]).T
                self.adj_classes.append((pos, idx, kslice))

        # COO triplets for materializing W^T from the kernel
        pgrid, qgrid = np.meshgrid(np.arange(self.P), np.arange(self.Q),
                                   indexing="ij")
        valid = self.fwd_idx < self.n_in
        p_v, q_v = pgrid[valid], qgrid[valid]
        rows_v = self.fwd_idx[valid]
        o = np.repeat(np.arange(out_ch), p_v.size)
        self.tm_rows = np.tile(rows_v, out_ch)
        self.tm_cols = o * self.P + np.tile(p_v, out_ch)
        self.tm_kidx = o * self.Q + np.tile(q_v, out_ch)

        # patch-to-column scatter as sorted segments (for reduceat)
        flat_cols = self.fwd_idx.ravel()
        self.col_order = np.argsort(flat_cols, kind="stable")
        sorted_cols = flat_cols[self.col_order]
        seg = np.concatenate([[0], np.flatnonzero(np.diff(sorted_cols)) + 1])
        self.col_starts = seg
        self.col_targets = sorted_cols[seg]


def _slab_ranges(m, per_row):
    step = max(1, _SLAB_BUDGET // max(1, per_row))
    for lo in range(0, m, step):
        yield lo, min(m, lo + step)


def _conv_fwd_value(v, kflat, g: _ConvGeom):
    m = v.shape[0]
    out = np.empty((m, g.n_out))
    for lo, hi in _slab_ranges(m, g.P * g.Q):
        va = np.concatenate([v[lo:hi], np.zeros((hi - lo, 1))], axis=1)
        patches = va[:, g.fwd_idx].reshape((hi - lo) * g.P, g.Q)
        o = patches @ kflat.T
        out[lo:hi] = o.reshape(hi - lo, g.P, g.out_ch).transpose(0, 2, 1) \
                      .reshape(hi - lo, g.n_out)
    return out


def _conv_fwd_grad_k(v, gout, g: _ConvGeom):
    gk = np.zeros((g.out_ch, g.Q))
    for lo, hi in _slab_ranges(v.shape[0], g.P * g.Q):
        va = np.concatenate([v[lo:hi], np.zeros((hi - lo, 1))], axis=1)
        patches = va[:, g.fwd_idx].reshape((hi - lo) * g.P, g.Q)
        gr = gout[lo:hi].reshape(hi - lo, g.out_ch, g.P).transpose(0, 2, 1) \
                        .reshape((hi - lo) * g.P, g.out_ch)
        gk += gr.T @ patches
    return gk


def _conv_adj_value(v, kflat, g: _ConvGeom):
    m = v.shape[0]
    kall = kflat.ravel()
    out = np.zeros((m, g.n_in))
    out3 = out.reshape(m, g.in_ch, g.in_h * g.in_w)
    va = np.concatenate([v, np.zeros((m, 1))], axis=1)
    for pos, idx, kslice in g.adj_classes:
        kc = kall[kslice]                      # (in_ch, n_taps)
        n_pos, n_taps = idx.shape
        for lo, hi in _slab_ranges(m, n_pos * n_taps):
            patches = va[lo:hi][:, idx].reshape((hi - lo) * n_pos, n_taps)
            res = (patches @ kc.T).reshape(hi - lo, n_pos, g.in_ch)
            out3[lo:hi, :, pos] = res.transpose(0, 2, 1)
    return out


def _conv_adj_grad_k(v, gout, g: _ConvGeom):
    m = v.shape[0]
    va = np.concatenate([v, np.zeros((m, 1))], axis=1)
    g3 = gout.reshape(m, g.in_ch, g.in_h * g.in_w)
    dk = np.zeros(g.out_ch * g.Q)
    for pos, idx, kslice in g.adj_classes:
        n_pos, n_taps = idx.shape
        dkc = np.zeros((g.in_ch, n_taps))
        for lo, hi in _slab_ranges(m, n_pos * n_taps):
            patches = va[lo:hi][:, idx].reshape((hi - lo) * n_pos, n_taps)
            gr = g3[lo:hi, :, pos].transpose(0, 2, 1) \
                                  .reshape((hi - lo) * n_pos, g.in_ch)
            dkc += gr.T @ patches
        dk[kslice.ravel()] += dkc.ravel()      # tap indices are disjoint
    return dk.reshape(g.out_ch, g.Q)


def _conv_rows_op(v, kernel, g: _ConvGeom, adjoint: bool):
    vv = val(v)
    kflat = val(kernel).reshape(g.out_ch, g.Q)
    if adjoint:
        out = _conv_adj_value(vv, kflat, g)
    else:
        out = _conv_fwd_value(vv, kflat, g)

    def vjp(gr):
        if adjoint:
            gv = _conv_fwd_value(gr, kflat, g)
            gk = _conv_adj_grad_k(vv, gr, g)
        else:
            gv = _conv_adj_value(gr, kflat, g)
            gk = _conv_fwd_grad_k(vv, gr, g)
        return gv, gk.reshape(g.out_ch, g.in_ch, g.kh, g.kw)

    return ad._node(out, (v, kernel), vjp)


def shared_scale_conv(wt_shared, d, layer: "Conv2dLayer"):
    """(wt_shared ∘ d_e) @ W^T for every example e, without materializing
    the per-example scaled copies.

    wt_shared is (n1, n_in) (shared across the batch), d is (B, n_in), and
    the layer supplies W.  Exploits that the left factor is shared: one
    im2col of wt_shared feeds P small matmuls against per-example
    kernel-times-scale tensors.  Returns (B, n1, n_out).
    """
    g = layer.geom
    wv, dv = val(wt_shared), val(d)
    kv = val(layer.weight)
    kflat = kv.reshape(g.out_ch, g.Q)
    n1, bsz = wv.shape[0], dv.shape[0]
    bo = bsz * g.out_ch
    wa = np.concatenate([wv, np.zeros((n1, 1))], axis=1)
    patches = wa[:, g.fwd_idx]                      # (n1, P, Q)
    da = np.concatenate([dv, np.zeros((bsz, 1))], axis=1)
    dcol = da[:, g.fwd_idx]                         # (B, P, Q)
    # per-position mixing matrices (P, Q, B*O)
    mix = (dcol[:, :, :, None] * kflat.T[None, None, :, :]) \
        .transpose(1, 2, 0, 3).reshape(g.P, g.Q, bo)
    prod = np.empty((g.P, n1, bo))
    for p in range(g.P):
        np.matmul(patches[:, p, :], mix[p], out=prod[p])
    out = np.ascontiguousarray(
        prod.reshape(g.P, n1, bsz, g.out_ch).transpose(2, 1, 3, 0)) \
        .reshape(bsz, n1, g.n_out)

    def vjp(gr):
        grp = np.ascontiguousarray(
            gr.reshape(bsz, n1, g.out_ch, g.P).transpose(3, 1, 0, 2)) \
            .reshape(g.P, n1, bo)
        gpatches = np.empty((n1, g.P, g.Q))
        gmix = np.empty((g.P, g.Q, bo))
        for p in range(g.P):
            np.matmul(grp[p], mix[p].T, out=gpatches[:, p, :])
            np.matmul(patches[:, p, :].T, grp[p], out=gmix[p])
        gm = gmix.reshape(g.P, g.Q, bsz, g.out_ch).transpose(2, 0, 1, 3)
        g_dcol = np.einsum("bpqo,oq->bpq", gm, kflat)
        g_k = np.einsum("bpqo,bpq->oq", gm, dcol)
        g_d = np.zeros((bsz, dv.shape[1] + 1))
        flat_cols = g.fwd_idx.ravel()
        for e in range(bsz):
            g_d[e] = np.bincount(flat_cols, weights=g_dcol[e].ravel(),
                                 minlength=dv.shape[1] + 1)
        gp_sorted = gpatches.reshape(n1, -1)[:, g.col_order]
        g_w = np.zeros((n1, wv.shape[1] + 1))
        g_w[:, g.col_targets] = np.add.reduceat(gp_sorted, g.col_starts,
                                                axis=1)
        return (g_w[:, :-1], g_d[:, :-1],
                g_k.reshape(g.out_ch, g.in_ch, g.kh, g.kw))

    return ad._node(out, (wt_shared, d, layer.weight), vjp)


def _conv_t_matrix_op(kernel, g: _ConvGeom):
    kflat = val(kernel).ravel()
    mat = np.zeros(g.n_in * g.n_out)
    mat[g.tm_rows * g.n_out + g.tm_cols] = kflat[g.tm_kidx]

    def vjp(gr):
        picked = gr.ravel()[g.tm_rows * g.n_out + g.tm_cols]
        gk = np.bincount(g.tm_kidx, weights=picked, minlength=kflat.size)
        return (gk.reshape(g.out_ch, g.in_ch, g.kh, g.kw),)

    return ad._node(mat.reshape(g.n_in, g.n_out), (kernel,), vjp)


class Conv2dLayer:
    kind = "conv2d"

    def __init__(self, kernel, bias, stride, pad, in_h, in_w):
        k = np.asarray(kernel, dtype=np.float64)
        b = np.asarray(bias, dtype=np.float64)
        if k.ndim != 4:
            raise ModelFormatError("conv kernel must be (out_ch, in_ch, kh, kw)")
        out_ch, in_ch, kh, kw = k.shape
        if kh != kw:
            raise ModelFormatError("conv kernels are restricted to square shapes")
        if stride < 1 or pad < 0:
            raise ModelFormatError("conv needs stride >= 1 and pad >= 0")
        if b.shape != (out_ch,):
            raise ModelFormatError(
                f"conv bias length {b.shape} does not match out_ch {out_ch}")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(b))):
            raise ModelFormatError("conv layer has non-finite parameters")
        self.geom = _ConvGeom(in_ch, out_ch, kh, kw, stride, pad, in_h, in_w)
        self.weight = Var(k, requires_grad=True)
        self._bias_ch = Var(b, requires_grad=True)
        self.input_dim = self.geom.n_in
        self.output_dim = self.geom.n_out

    @property
    def bias(self):
        """Per-channel bias broadcast to the flattened output layout."""
        g = self.geom
        rep = ad.reshape(self._bias_ch, (g.out_ch, 1)) * np.ones((1, g.P))
        return ad.reshape(rep, (g.n_out,))

    def apply_rows(self, v):
        return _conv_rows_op(v, self.weight, self.geom, adjoint=False)

    def apply_rows_t(self, v):
        return _conv_rows_op(v, self.weight, self.geom, adjoint=True)

    def t_matrix(self):
        return _conv_t_matrix_op(self.weight, self.geom)

    def params(self):
        return [self.weight, self._bias_ch]

    def to_record(self):
        g = self.geom
        return {
            "kind": "conv2d",
            "in_ch": g.in_ch, "out_ch": g.out_ch,
            "kh": g.kh, "kw": g.kw,
            "stride": g.stride, "pad": g.pad,
            "in_h": g.in_h, "in_w": g.in_w,
            "weight": self.weight.value.ravel().tolist(),
            "bias": self._bias_ch.value.tolist(),
        }


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

class Network:
    """Affine layers with implicit ReLUs between (none after the last)."""

    def __init__(self, layers):
        if not layers:
            raise ModelFormatError("network needs at least one affine layer")
        for j in range(len(layers) - 1):
            if layers[j].output_dim != layers[j + 1].input_dim:
                raise ShapeMismatch(
                    f"layer {j} output dim {layers[j].output_dim} != "
                    f"layer {j + 1} input dim {layers[j + 1].input_dim}")
        self.layers = list(layers)

    @property
    def k(self):
        """Layer count in the k-layer convention (affine layers + 1)."""
        return len(self.layers) + 1

    @property
    def input_dim(self):
        return self.layers[0].input_dim

    @property
    def output_dim(self):
        return self.layers[-1].output_dim

    def widths(self):
        """Dims of x, z_hat_2, ..., z_hat_k."""
        return [self.input_dim] + [la.output_dim for la in self.layers]

    def params(self):
        return [p for la in self.layers for p in la.params()]

    def set_trainable(self, flag: bool):
        for p in self.params():
            p.requires_grad = bool(flag)

    def truncated(self, n_layers: int) -> "Network":
        """Sub-network of the first `n_layers` affine layers (shared params)."""
        net = Network.__new__(Network)
        net.layers = self.layers[:n_layers]
        return net

    def forward_rows_var(self, x_rows) -> Var:
        """Differentiable forward pass on a row-stack of inputs."""
        v = x_rows
        for j, la in enumerate(self.layers):
            dim = val(v).shape[1]
            if dim != la.input_dim:
                raise ShapeMismatch(
                    f"layer {j}: input width {dim} != expected {la.input_dim}")
            if j > 0:
                v = ad.relu(v)
            v = la.apply_rows(v) + la.bias
        return v

    def forward(self, x, capture=False):
        """Logits for a single input or a batch; optionally all z_hat_i."""
        arr = as_input(x)
        single = arr.ndim == 1
        rows = arr.reshape(1, -1) if single else arr
        preacts = []
        with ad.no_grad():
            v = rows
            for j, la in enumerate(self.layers):
                if v.shape[1] != la.input_dim:
                    raise ShapeMismatch(
                        f"layer {j}: input width {v.shape[1]} != "
                        f"expected {la.input_dim}")
                if j > 0:
                    v = np.maximum(val(v), 0.0)
                v = val(la.apply_rows(v)) + val(la.bias)
                if capture:
                    preacts.append(v[0] if single else v)
        out = v[0] if single else v
        if capture:
            return out, preacts
        return out


def forward(net: Network, x, capture=False):
    """Evaluate the network; returns logits (and pre-activations if asked)."""
    return net.forward(x, capture=capture)


def adjoint_apply(layer, v):
    """W^T v without bias; matrices apply the adjoint to each column."""
    arr = as_input(v)
    single = arr.ndim == 1
    cols = arr.reshape(-1, 1) if single else arr
    if cols.shape[0] != layer.output_dim:
        raise ShapeMismatch(
            f"adjoint input has {cols.shape[0]} rows, layer output dim is "
            f"{layer.output_dim}")
    with ad.no_grad():
        out = val(layer.apply_rows_t(cols.T)).T
    return out[:, 0] if single else out


def adjoint_on_basis(layer) -> np.ndarray:
    """W^T as an explicit (input_dim, output_dim) matrix."""
    with ad.no_grad():
        return val(layer.t_matrix())


# --------------------------------------------------------------------------
# model file format
# --------------------------------------------------------------------------

def layer_from_record(rec: dict) -> object:
    try:
        kind = rec["kind"]
        if kind == "dense":
            n_in, n_out = int(rec["in"]), int(rec["out"])
            w = np.asarray(rec["weight"], dtype=np.float64)
            if w.size != n_in * n_out:
                raise ModelFormatError(
                    f"dense weight has {w.size} values, expected "
                    f"{n_out}x{n_in}")
            return DenseLayer(w.reshape(n_out, n_in), rec["bias"])
        if kind == "conv2d":
            oc, ic = int(rec["out_ch"]), int(rec["in_ch"])
            kh, kw = int(rec["kh"]), int(rec["kw"])
            w = np.asarray(rec["weight"], dtype=np.float64)
            if w.size != oc * ic * kh * kw:
                raise ModelFormatError(
                    f"conv weight has {w.size} values, expected "
                    f"{oc}*{ic}*{kh}*{kw}")
            return Conv2dLayer(
                w.reshape(oc, ic, kh, kw), rec["bias"],
                int(rec["stride"]), int(rec["pad"]),
                int(rec["in_h"]), int(rec["in_w"]))
        raise ModelFormatError(f"unknown layer kind {kind!r}")
    except KeyError as e:
        raise ModelFormatError(f"layer record missing field {e}") from e


def load_model(path) -> Network:
    with open(path) as f:
        try:
            records = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"not valid JSON: {e}") from e
    if not isinstance(records, list):
        raise ModelFormatError("model file must hold a list of layer records")
    try:
        return Network([layer_from_record(r) for r in records])
    except ShapeMismatch as e:
        raise ModelFormatError(str(e)) from e


def save_model(net: Network, path):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        json.dump([la.to_record() for la in net.layers], f)
    os.replace(tmp, path)
