"""Robust loss, its exact parameter gradients, and the training loop.

The robust loss feeds the objective matrix e_y 1^T - I through the bound
pass and dual pass, producing per-class upper bounds -J on the worst-case
logit gaps; any translation-invariant monotone loss applied to -J upper
bounds the true worst-case adversarial loss.  Gradients flow through the
entire construction (bounds included) with the index partitions held
fixed, so a standard first-order optimizer trains the certificate
directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, val
from .bounds import bound_pass_vars
from .dual import LINF, DualNorm, dual_rows
from .linops import Network, as_input
from .seeds import substream

LOSS_KINDS = ("cross_entropy", "hinge", "zero_one")

# microbatch sizing keeps the basis matrix of the bound pass near this
# many floats so the whole tape stays within a couple of GB
_TAPE_BUDGET = 80_000_000


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


# --------------------------------------------------------------------------
# losses (all translation invariant, see Property tests)
# --------------------------------------------------------------------------

def loss_value(kind: str, logits, y):
    """Differentiable batch-mean loss; `logits` may be a Var."""
    y = np.asarray(y, dtype=np.intp)
    if kind == "cross_entropy":
        return ad.cross_entropy_mean(logits, y)
    if kind == "hinge":
        lv = val(logits)
        n, c = lv.shape
        vy = ad.take_flat(logits, np.arange(n) * c + y)
        not_y = 1.0 - np.eye(c)[y]
        per = ad.asum(ad.relu(logits - ad.reshape(vy, (n, 1)) + 1.0) * not_y,
                      axis=1)
        return ad.amean(per)
    if kind == "zero_one":
        lv = val(logits)
        return Var(float(np.mean(np.argmax(lv, axis=1) != y)))
    raise ValueError(f"unknown loss kind {kind!r}; pick one of {LOSS_KINDS}")


# --------------------------------------------------------------------------
# robust loss
# --------------------------------------------------------------------------

@dataclass
class RobustLossReport:
    robust_logits: np.ndarray    # (B, C), entry y is exactly 0
    loss: float
    robust_err: np.ndarray       # per-example bool: no certificate at y
    clean_logits: np.ndarray
    clean_loss: float


def robust_logits_var(net: Network, x_rows, y, eps, norm: DualNorm = LINF):
    """-J for the objective matrix e_y 1^T - I, one row per example."""
    x_rows = np.asarray(x_rows, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    bsz, c = x_rows.shape[0], net.output_dim
    bv = bound_pass_vars(net, x_rows, eps, norm=norm, skip_last=True)
    eye = np.eye(c)
    c_rows = np.repeat(eye[y], c, axis=0) - np.tile(eye, (bsz, 1))
    owner = np.repeat(np.arange(bsz), c)
    j_rows, _, _ = dual_rows(net, c_rows, owner, bv.lvars, bv.uvars,
                             bv.parts, x_rows, eps, norm, dspans=bv.dspans)
    return ad.neg(ad.reshape(j_rows, (bsz, c)))


def robust_logits(net: Network, x, y, eps, norm: DualNorm = LINF):
    """Single-example vector of certified worst-case logit gaps."""
    arr = as_input(x)
    with ad.no_grad():
        out = robust_logits_var(net, arr.reshape(1, -1), [int(y)], float(eps),
                                norm)
    return val(out)[0]


def robust_loss_var(net: Network, x_rows, y, eps, kind="cross_entropy",
                    norm: DualNorm = LINF):
    """(loss Var, RobustLossReport) for a batch."""
    x_rows = np.asarray(x_rows, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if x_rows.shape[0] == 0:
        raise ValueError("robust loss needs a nonempty batch")
    rl = robust_logits_var(net, x_rows, y, eps, norm=norm)
    loss = loss_value(kind, rl, y)
    rlv = val(rl)
    with ad.no_grad():
        clean = net.forward(x_rows)
        closs = float(val(loss_value(kind, Var(clean), y)))
    mask = np.ones_like(rlv, dtype=bool)
    mask[np.arange(len(y)), y] = False
    robust_err = (rlv * mask).max(axis=1) > 0.0
    report = RobustLossReport(rlv, float(val(loss)), robust_err, clean, closs)
    return loss, report


def robust_loss(net: Network, x_rows, y, eps, kind="cross_entropy",
                norm: DualNorm = LINF):
    with ad.no_grad():
        loss, report = robust_loss_var(net, x_rows, y, eps, kind, norm)
    return float(val(loss)), report


def robust_grad(net: Network, x_rows, y, eps, kind="cross_entropy",
                norm: DualNorm = LINF):
    """Exact gradient of the batch robust loss for every weight and bias,
    returned as one (grad_weight, grad_bias) pair per layer."""
    net.set_trainable(True)
    params = net.params()
    for p in params:
        p.grad = None
    loss, _ = robust_loss_var(net, x_rows, y, eps, kind, norm)
    loss.backward()
    out = []
    for la in net.layers:
        pw, pb = la.params()
        out.append((np.zeros_like(pw.value) if pw.grad is None else pw.grad,
                    np.zeros_like(pb.value) if pb.grad is None else pb.grad))
    for p in params:
        p.grad = None
    return out


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class SGD:
    def __init__(self, params, lr=0.1):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.value -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# --------------------------------------------------------------------------
# configuration and schedule
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    eps_target: float
    epochs: int
    batch_size: int = 50
    eps_start: float = None       # None: constant eps_target
    ramp_epochs: int = 0
    optimizer: str = "adam"       # "adam" | "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "cross_entropy"
    norm: DualNorm = LINF
    objective: str = "robust"     # "robust" | "standard"
    microbatch: int = None        # None: sized automatically
    stop_robust_err: float = None  # early-stop threshold on the bound

    def __post_init__(self):
        if self.eps_target < 0:
            raise ValueError("eps_target must be >= 0")
        if self.eps_start is not None:
            if not 0 < self.eps_start <= self.eps_target:
                raise ValueError("need 0 < eps_start <= eps_target")
            if self.ramp_epochs > self.epochs:
                raise ValueError("ramp_epochs cannot exceed epochs")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.objective not in ("robust", "standard"):
            raise ValueError("objective must be 'robust' or 'standard'")


def eps_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Linear per-epoch ramp from eps_start to eps_target, constant after."""
    if cfg.eps_start is None or cfg.ramp_epochs <= 1:
        return cfg.eps_target
    frac = min(1.0, epoch / (cfg.ramp_epochs - 1))
    return cfg.eps_start + (cfg.eps_target - cfg.eps_start) * frac


@dataclass
class EpochMetrics:
    epoch: int
    eps: float
    clean_loss: float
    clean_err: float
    robust_loss: float
    robust_err_bound: float


@dataclass
class TrainResult:
    net: Network
    epochs: list = field(default_factory=list)
    batches: list = field(default_factory=list)  # (epoch, batch, clean_loss, robust_loss)


def _auto_microbatch(net: Network, batch_size: int) -> int:
    per_row = net.input_dim * max(net.widths())
    return int(np.clip(_TAPE_BUDGET // max(1, per_row), 1, batch_size))


def train(net: Network, inputs, labels, cfg: TrainConfig) -> TrainResult:
    """Minibatch training of the robust (or standard) objective."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = inputs.shape[0]
    net.set_trainable(True)
    params = net.params()
    if cfg.optimizer == "adam":
        opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   eps=cfg.adam_eps)
    elif cfg.optimizer == "sgd":
        opt = SGD(params, lr=cfg.lr)
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    rng = substream(cfg.seed, "shuffle")
    micro = cfg.microbatch or _auto_microbatch(net, cfg.batch_size)
    result = TrainResult(net)

    for epoch in range(cfg.epochs):
        eps = eps_at_epoch(cfg, epoch)
        perm = rng.permutation(n)
        sums = np.zeros(4)  # clean_loss, clean_err, robust_loss, robust_err
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            sel = perm[lo:lo + cfg.batch_size]
            xb, yb = inputs[sel], labels[sel]
            opt.zero_grad()
            batch_robust = np.nan
            if cfg.objective == "robust":
                batch_loss = 0.0
                batch_err = 0.0
                for mlo in range(0, len(sel), micro):
                    xm, ym = xb[mlo:mlo + micro], yb[mlo:mlo + micro]
                    loss, rep = robust_loss_var(net, xm, ym, eps,
                                                cfg.loss, cfg.norm)
                    (loss * (len(ym) / len(sel))).backward()
                    batch_loss += float(val(loss)) * len(ym)
                    batch_err += float(rep.robust_err.sum())
                batch_robust = batch_loss / len(sel)
                sums[2] += batch_loss
                sums[3] += batch_err
            else:
                logits = net.forward_rows_var(xb)
                loss = loss_value(cfg.loss, logits, yb)
                loss.backward()
            with ad.no_grad():
                clean = net.forward(xb)
            closs = float(val(loss_value(cfg.loss, Var(clean), yb)))
            cerr = float(np.mean(np.argmax(clean, axis=1) != yb))
            sums[0] += closs * len(sel)
            sums[1] += cerr * len(sel)
            if not np.isfinite(closs) or (
                    cfg.objective == "robust" and not np.isfinite(batch_robust)):
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch} batch {bi} "
                    f"(clean={closs}, robust={batch_robust})")
            result.batches.append((epoch, bi, closs, batch_robust))
            opt.step()
        row = EpochMetrics(epoch, eps, sums[0] / n, sums[1] / n,
                           sums[2] / n if cfg.objective == "robust" else np.nan,
                           sums[3] / n if cfg.objective == "robust" else np.nan)
        result.epochs.append(row)
        if (cfg.stop_robust_err is not None and cfg.objective == "robust"
                and row.robust_err_bound <= cfg.stop_robust_err):
            break
    return result


def metrics_csv_rows(result: TrainResult):
    header = "epoch,eps,clean_loss,clean_err,robust_loss,robust_err_bound"
    rows = [header]
    for m in result.epochs:
        vals = [float(m.eps), float(m.clean_loss), float(m.clean_err),
                float(m.robust_loss), float(m.robust_err_bound)]
        rows.append(",".join([str(m.epoch)] + [repr(v) for v in vals]))
    return rows
