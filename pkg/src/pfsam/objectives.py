"""Training and perturbation objectives over logits.

Every loss takes a logits Var of shape (n, C) and integer labels, and reduces by
the mean over the batch (and over classes for the sigmoid head).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffengine as de


@dataclass(frozen=True)
class LossKind:
    name: str = "ce"
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.name not in ("ce", "sigmoid_ce", "ce_label_smooth"):
            raise ValueError(f"unknown loss {self.name!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")

    @property
    def head(self) -> str:
        return "sigmoid" if self.name == "sigmoid_ce" else "softmax"


@dataclass(frozen=True)
class OBFParams:
    gamma: float = 1.0
    lam: Optional[float] = None  # None means 1/C

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.lam is not None and not 0.0 <= self.lam < 1.0:
            raise ValueError("lambda must lie in [0, 1)")

    def resolve_lam(self, num_classes: int) -> float:
        return 1.0 / num_classes if self.lam is None else self.lam


def _labels(logits: de.Var, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    n, C = logits.shape
    if y.shape != (n,):
        raise de.UsageError(f"labels shape {y.shape} does not match batch {n}")
    if n and (y.min() < 0 or y.max() >= C):
        raise de.UsageError(f"labels must lie in [0, {C})")
    return y


def _onehot(y: np.ndarray, C: int) -> np.ndarray:
    out = np.zeros((y.size, C))
    out[np.arange(y.size), y] = 1.0
    return out


def ce_loss(logits: de.Var, y) -> de.Var:
    y = _labels(logits, y)
    return de.mean(de.logsumexp(logits) - de.gather(logits, y))


def soft_target_ce(logits: de.Var, target) -> de.Var:
    """CE against a target distribution per row (shape (n, C) or (C,))."""
    q = logits.graph.constant(target)
    return de.mean(de.logsumexp(logits) - de.sum_(logits * q, axis=1))


def ce_label_smooth(logits: de.Var, y, eps: float) -> de.Var:
    if not 0.0 <= eps <= 1.0:
        raise de.UsageError("label smoothing must lie in [0, 1]")
    y = _labels(logits, y)
    C = logits.shape[1]
    return soft_target_ce(logits, (1.0 - eps) * _onehot(y, C) + eps / C)


def uniform_ce(logits: de.Var) -> de.Var:
    C = logits.shape[1]
    return soft_target_ce(logits, np.full((logits.shape[0], C), 1.0 / C))


def softplus(z: de.Var) -> de.Var:
    # log(1 + e^z) as a two-way logsumexp against 0; stable and exact at z = 0
    flat = de.reshape(z, (z.value.size, 1))
    pair = flat * z.graph.constant(np.array([[0.0, 1.0]]))
    return de.reshape(de.logsumexp(pair), z.shape)


def sigmoid_ce_loss(logits: de.Var, y) -> de.Var:
    y = _labels(logits, y)
    target = logits.graph.constant(_onehot(y, logits.shape[1]))
    return de.mean(softplus(logits) - logits * target)


def task_loss(kind: LossKind, logits: de.Var, y) -> de.Var:
    if kind.name == "ce":
        return ce_loss(logits, y)
    if kind.name == "sigmoid_ce":
        return sigmoid_ce_loss(logits, y)
    return ce_label_smooth(logits, y, kind.label_smoothing)


def _alpha_array(alpha, n) -> np.ndarray:
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,))
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise de.UsageError("alpha must lie in [0, 1]")
    return alpha


def obf_objective(logits: de.Var, y, alpha) -> de.Var:
    """Mean over the batch of (1 - alpha) CE(y) - CE(uniform).

    ``alpha`` is a per-sample constant; no gradient flows through it.
    Logit gradient per row: (u - (alpha * yhat + (1 - alpha) * onehot)) / n.
    """
    y = _labels(logits, y)
    n, C = logits.shape
    a = logits.graph.constant(_alpha_array(alpha, n))
    lse = de.logsumexp(logits)
    ce = lse - de.gather(logits, y)
    ce_u = lse - de.mean(logits, axis=1)
    return de.mean((1.0 - a) * ce - ce_u)


def sigmoid_obf_objective(logits: de.Var, y, alpha) -> de.Var:
    """Sigmoid-head analogue of :func:`obf_objective`.

    The softmax expectation over yhat becomes a plain sum over sigmoid
    likelihoods, so the logit gradient is u - alpha * sigmoid(z) - (1 - alpha) e_y,
    averaged over the n * C logits like :func:`sigmoid_ce_loss`.
    """
    y = _labels(logits, y)
    n, C = logits.shape
    g = logits.graph
    a = g.constant(_alpha_array(alpha, n).reshape(n, 1))
    target = g.constant(_onehot(y, C))
    per_logit = logits * (1.0 / C) - a * softplus(logits) - (1.0 - a) * (logits * target)
    return de.mean(per_logit)


def dynamic_alpha(yhat_y, gamma: float, lam: float):
    """Per-sample forgetting strength gamma * max((1 - lam / yhat_y) / (1 - lam), 0)."""
    if not 0.0 <= lam < 1.0 or not 0.0 <= gamma <= 1.0:
        raise de.UsageError("need lam in [0, 1) and gamma in [0, 1]")
    p = np.asarray(yhat_y, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise de.UsageError("target likelihood must lie in (0, 1]")
    alpha = gamma * np.maximum((1.0 - lam / p) / (1.0 - lam), 0.0)
    return alpha if alpha.ndim else float(alpha)
