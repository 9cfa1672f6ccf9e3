"""Robustness certificates, adversarial-input detection, robust error,
and the maximum-certified-radius search.

A nonnegative dual objective J for every competing class proves no
perturbation in the ball can change the prediction; the fraction of
examples lacking that certificate upper-bounds any attack's error rate.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, val
from .bounds import bound_pass_vars
from .dual import LINF, DualNorm, dual_rows
from .linops import Network, as_input

_EPS_CAP = 10.0


@dataclass
class CertificateReport:
    index: int
    predicted: int
    certified: bool
    margin: float                 # min over targets of J
    eps: float
    true_label: int = None
    max_certified_eps: float = None
    newton_iters: int = None

    def to_json(self):
        rec = {
            "index": self.index,
            "predicted": self.predicted,
            "certified": self.certified,
            "margin": self.margin,
            "eps": self.eps,
        }
        if self.true_label is not None:
            rec["true_label"] = self.true_label
        if self.max_certified_eps is not None:
            rec["max_certified_eps"] = self.max_certified_eps
            rec["newton_iters"] = self.newton_iters
        return json.dumps(rec)


def _j_targets(net: Network, x, label, eps, norm, need_grad_eps=False):
    """J over targets i != label; optionally returns dJ_min/d eps."""
    x = as_input(x).ravel()
    c = net.output_dim
    eye = np.eye(c)
    c_rows = eye[label][None, :] - eye
    owner = np.zeros(c, dtype=np.intp)
    flags = [p.requires_grad for p in net.params()]
    net.set_trainable(False)
    try:
        eps_v = Var(float(eps), requires_grad=need_grad_eps)
        if need_grad_eps:
            bv = bound_pass_vars(net, x[None], eps_v, norm=norm)
            j_rows, _, _ = dual_rows(net, c_rows, owner, bv.lvars, bv.uvars,
                                     bv.parts, x[None], eps_v, norm,
                                     dspans=bv.dspans)
            jv = val(j_rows)
            others = np.arange(c) != label
            kmin = int(np.flatnonzero(others)[np.argmin(jv[others])])
            ad.take_flat(j_rows, [kmin]).backward()
            slope = float(eps_v.grad) if eps_v.grad is not None else 0.0
            return jv, slope
        with ad.no_grad():
            bv = bound_pass_vars(net, x[None], float(eps), norm=norm)
            j_rows, _, _ = dual_rows(net, c_rows, owner, bv.lvars, bv.uvars,
                                     bv.parts, x[None], float(eps), norm,
                                     dspans=bv.dspans)
        return val(j_rows), None
    finally:
        for p, fl in zip(net.params(), flags):
            p.requires_grad = fl


def certify_label(net: Network, x, y_star, eps, norm: DualNorm = LINF):
    """(certified, margin): J >= 0 for all targets proves robustness of
    label y_star on the eps ball around x."""
    j, _ = _j_targets(net, x, int(y_star), eps, norm)
    if not np.all(np.isfinite(j)):
        raise FloatingPointError("non-finite dual objective in certificate")
    others = np.arange(net.output_dim) != int(y_star)
    margin = float(j[others].min())
    return margin >= 0.0, margin


def detect(net: Network, x, eps, norm: DualNorm = LINF) -> bool:
    """True when x provably cannot be an eps-adversarial perturbation of a
    correctly-classified point (certificate at the predicted class)."""
    yhat = int(np.argmax(net.forward(x)))
    ok, _ = certify_label(net, x, yhat, eps, norm)
    return ok


def robust_error(net: Network, inputs, labels, eps,
                 norm: DualNorm = LINF) -> float:
    """Fraction of examples without a certificate at their true label."""
    inputs = np.atleast_2d(as_input(inputs))
    bad = 0
    for x, y in zip(inputs, np.asarray(labels, dtype=np.intp)):
        ok, _ = certify_label(net, x, int(y), eps, norm)
        bad += not ok
    return bad / inputs.shape[0]


def _phi(net, x, yhat, eps, norm, with_slope=False):
    j, slope = _j_targets(net, x, yhat, eps, norm, need_grad_eps=with_slope)
    if not np.all(np.isfinite(j)):
        raise FloatingPointError(f"non-finite certificate value at eps={eps}")
    others = np.arange(net.output_dim) != yhat
    return float(j[others].min()), slope


def max_certified_eps(net: Network, x, norm: DualNorm = LINF,
                      tol: float = 1e-3, eps_cap: float = _EPS_CAP):
    """Largest eps with a certificate at the predicted class, found by a
    bracketed Newton iteration on phi(eps) = min_target J (bisection
    whenever a Newton step leaves the bracket).  Returns (eps, iters)."""
    x = as_input(x).ravel()
    yhat = int(np.argmax(net.forward(x)))
    phi0, _ = _phi(net, x, yhat, 0.0, norm)
    if phi0 < 0.0:
        return 0.0, 0
    lo, hi = 0.0, 0.01
    while True:
        v, _ = _phi(net, x, yhat, hi, norm)
        if v < 0.0:
            break
        lo = hi
        hi *= 2.0
        if hi >= eps_cap:
            return eps_cap, 0
    iters = 0
    cur = hi
    while hi - lo > max(tol * lo, 1e-12) and iters < 60:
        iters += 1
        v, slope = _phi(net, x, yhat, cur, norm, with_slope=True)
        if v >= 0.0:
            lo = max(lo, cur)
        else:
            hi = min(hi, cur)
        nxt = cur - v / slope if slope < -1e-18 else None
        if nxt is not None and abs(nxt - cur) < 0.45 * tol * max(cur, 1e-12):
            # Newton has stalled at the root from one side; hop across it so
            # the bracket closes instead of creeping
            nxt = cur * (1 - 0.9 * tol) if v < 0.0 else cur * (1 + 0.9 * tol)
        if nxt is None or not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        cur = nxt
    return lo, iters


def certificate_reports(net: Network, inputs, labels=None, eps=0.1,
                        norm: DualNorm = LINF, with_max_eps=False,
                        newton_tol=1e-3):
    inputs = np.atleast_2d(as_input(inputs))
    preds = np.argmax(net.forward(inputs), axis=1)
    out = []
    for i, x in enumerate(inputs):
        y_true = None if labels is None else int(labels[i])
        anchor = y_true if y_true is not None else int(preds[i])
        ok, margin = certify_label(net, x, anchor, eps, norm)
        rep = CertificateReport(i, int(preds[i]), bool(ok), margin,
                                float(eps), true_label=y_true)
        if with_max_eps:
            rep.max_certified_eps, rep.newton_iters = max_certified_eps(
                net, x, norm, tol=newton_tol)
        out.append(rep)
    return out


def write_reports_jsonl(reports, path):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        for rep in reports:
            f.write(rep.to_json() + "\n")
    os.replace(tmp, path)


def summarize_reports(reports):
    n = len(reports)
    certified = sum(r.certified for r in reports)
    wrong = sum(1 for r in reports
                if r.true_label is not None and r.predicted != r.true_label)
    return {
        "n": n,
        "certified": certified,
        "robust_error": 1.0 - certified / n,
        "clean_error": wrong / n if any(
            r.true_label is not None for r in reports) else None,
    }
