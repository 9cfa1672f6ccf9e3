"""FGSM and PGD attacks under the l-inf ball, used as empirical baselines
and as falsifiers for certificate soundness."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, val
from .linops import Network, as_input
from .seeds import substream
from .training import loss_value


@dataclass
class AttackResult:
    success: np.ndarray        # (N,) bool: found a label flip
    adversarial: np.ndarray    # (N, d) attacked inputs, inside the ball
    loss: np.ndarray           # (N,) loss at the returned point
    queries: np.ndarray        # (N,) gradient/forward evaluations used

    def single(self):
        return (bool(self.success[0]), self.adversarial[0],
                float(self.loss[0]), int(self.queries[0]))


def _input_grad(net: Network, x_rows, y, kind):
    flags = [p.requires_grad for p in net.params()]
    net.set_trainable(False)
    try:
        xv = Var(np.asarray(x_rows, dtype=np.float64), requires_grad=True)
        logits = net.forward_rows_var(xv)
        loss = loss_value(kind, logits, y)
        loss.backward()
        return xv.grad
    finally:
        for p, fl in zip(net.params(), flags):
            p.requires_grad = fl


def _per_example_loss(net, x_rows, y, kind):
    logits = net.forward(x_rows)
    out = np.empty(len(y))
    for i in range(len(y)):
        out[i] = float(val(loss_value(kind, Var(logits[i:i + 1]),
                                      y[i:i + 1])))
    return out, logits


def _clip(x_rows, x0, eps, domain):
    out = np.clip(x_rows, x0 - eps, x0 + eps)
    if domain is not None:
        out = np.clip(out, domain[0], domain[1])
    return out


def fgsm(net: Network, x, y, eps, domain=None,
         kind: str = "cross_entropy") -> AttackResult:
    """Single signed-gradient step of size eps, clipped to the domain."""
    x_rows = np.atleast_2d(as_input(x))
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    g = _input_grad(net, x_rows, y, kind)
    adv = _clip(x_rows + eps * np.sign(g), x_rows, eps, domain)
    loss, logits = _per_example_loss(net, adv, y, kind)
    success = np.argmax(logits, axis=1) != y
    return AttackResult(success, adv, loss, np.full(len(y), 2))


def pgd(net: Network, x, y, eps, steps: int = 40, step_size: float = None,
        restarts: int = 10, domain=None, kind: str = "cross_entropy",
        seed: int = 0) -> AttackResult:
    """Iterated projected signed-gradient ascent, best over restarts.

    Restart 0 starts at the clean point (so steps=1 with step_size=eps
    reduces to FGSM); the rest start uniformly inside the ball.
    """
    if steps < 1:
        raise ValueError("pgd needs steps >= 1")
    x_rows = np.atleast_2d(as_input(x))
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    n = len(y)
    step = eps / 10.0 if step_size is None else step_size
    rng = substream(seed, "attack")
    best_loss = np.full(n, -np.inf)
    best_adv = x_rows.copy()
    best_succ = np.zeros(n, dtype=bool)
    queries = np.zeros(n, dtype=np.intp)
    for r in range(max(1, restarts)):
        if r == 0:
            cur = x_rows.copy()
        else:
            cur = _clip(x_rows + rng.uniform(-eps, eps, size=x_rows.shape),
                        x_rows, eps, domain)
        for _ in range(steps):
            g = _input_grad(net, cur, y, kind)
            cur = _clip(cur + step * np.sign(g), x_rows, eps, domain)
            queries += 1
        loss, logits = _per_example_loss(net, cur, y, kind)
        queries += 1
        succ = np.argmax(logits, axis=1) != y
        # prefer any flip over a higher loss without one
        better = (succ & ~best_succ) | ((succ == best_succ) & (loss > best_loss))
        best_adv[better] = cur[better]
        best_loss[better] = loss[better]
        best_succ |= succ
    return AttackResult(best_succ, best_adv, best_loss, queries)


def attack_error(result: AttackResult) -> float:
    return float(np.mean(result.success))
