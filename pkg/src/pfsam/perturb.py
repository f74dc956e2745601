"""Weight perturbations for SAM-style updates and m-SAM microbatch ensembling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffengine as de
from .model import ModelConfig, ParameterVector, logits as model_logits
from .objectives import (
    LossKind,
    OBFParams,
    dynamic_alpha,
    obf_objective,
    sigmoid_obf_objective,
    task_loss,
)

KINDS = ("none", "steepest", "obf", "random")
ASAM_MODES = ("off", "standard", "fixed_norm")
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class Task:
    """A model architecture paired with its training loss."""

    model: ModelConfig
    loss: LossKind = LossKind()

    def loss_builder(self, X, y):
        def build(graph, theta):
            return task_loss(self.loss, model_logits(self.model, theta, X), y)

        return build

    def value_and_grad(self, theta, X, y):
        return de.value_and_grad(self.loss_builder(X, y), np.asarray(theta))

    def grad(self, theta, X, y) -> np.ndarray:
        return self.value_and_grad(theta, X, y)[1]


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "steepest"
    rho: float = 0.05
    m: Optional[int] = None  # microbatch size; None means the whole update batch
    obf: OBFParams = field(default_factory=OBFParams)
    asam: str = "off"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.asam not in ASAM_MODES:
            raise ValueError(f"unknown asam mode {self.asam!r}")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.m is not None and self.m < 1:
            raise ValueError("microbatch size must be positive")


@dataclass
class PerturbationResult:
    eps: np.ndarray
    grad_norm: float
    degenerate: bool
    grad: Optional[np.ndarray] = None  # the perturbing gradient at theta, when one exists


def _normalized(g: np.ndarray, rho: float) -> tuple[np.ndarray, float, bool]:
    norm = float(np.linalg.norm(g))
    if norm < DEGENERATE_NORM:
        return np.zeros_like(g), norm, True
    return rho * (g / norm), norm, False


def asam_apply(g, theta, mode: str, rho: float) -> tuple[np.ndarray, bool]:
    """Elementwise-rescaled ascent step with T = |theta|.

    ``standard`` normalizes T g and then rescales by T again (norm varies);
    ``fixed_norm`` rescales first and normalizes last, so ||eps|| = rho.
    """
    g = np.asarray(g, dtype=np.float64)
    T = np.abs(np.asarray(theta, dtype=np.float64))
    if g.shape != T.shape:
        raise de.UsageError(f"asam: gradient {g.shape} vs params {T.shape}")
    Tg = T * g
    norm = float(np.linalg.norm(Tg))
    if norm < DEGENERATE_NORM:
        return np.zeros_like(g), True
    if mode == "standard":
        return rho * (T * Tg) / norm, False
    if mode == "fixed_norm":
        return rho * (Tg / norm), False
    raise ValueError(f"unknown asam mode {mode!r}")


def _direction(g, theta, rho, asam) -> PerturbationResult:
    norm = float(np.linalg.norm(g))
    if asam == "off":
        eps, norm, degenerate = _normalized(g, rho)
    else:
        eps, degenerate = asam_apply(g, theta, asam, rho)
    return PerturbationResult(eps, norm, degenerate, g)


def steepest_perturb(task: Task, params, batch, rho: float, asam: str = "off") -> PerturbationResult:
    X, y = batch
    theta = np.asarray(params)
    return _direction(task.grad(theta, X, y), theta, rho, asam)


def obf_gradient(task: Task, theta, X, y, obf: OBFParams) -> np.ndarray:
    """Gradient of the mean output-bias-forgetting objective at ``theta``.

    alpha is computed per sample from the current target likelihood and held
    constant during differentiation.
    """
    C = task.model.num_classes
    lam = obf.resolve_lam(C)
    y = np.asarray(y, dtype=np.int64)
    graph = de.Graph()
    leaf = graph.leaf(np.asarray(theta))
    z = model_logits(task.model, leaf, X)
    if task.loss.head == "sigmoid":
        lik = de._sigmoid(z.value)
    else:
        lik = de._softmax(z.value)
    p = np.clip(lik[np.arange(y.size), y], np.finfo(np.float64).tiny, 1.0)
    alpha = dynamic_alpha(p, obf.gamma, lam)
    objective = sigmoid_obf_objective if task.loss.head == "sigmoid" else obf_objective
    (grad,) = de.backward(objective(z, y, alpha), [leaf])
    return grad


def obf_perturb(task: Task, params, batch, obf: OBFParams, rho: float, asam: str = "off") -> PerturbationResult:
    X, y = batch
    theta = np.asarray(params)
    return _direction(obf_gradient(task, theta, X, y, obf), theta, rho, asam)


def random_perturb(dim: int, rho: float, seed) -> PerturbationResult:
    """Uniform direction on the sphere of radius ``rho``."""
    if dim < 1:
        raise de.UsageError("dimension must be at least 1")
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(dim)
    d /= np.linalg.norm(d)
    eps = rho * d
    norm = np.linalg.norm(eps)
    if norm > 0:
        eps *= rho / norm
    return PerturbationResult(eps, 1.0, False)


def microbatch_partition(n: int, m: Optional[int], seed: int, step: int) -> list[np.ndarray]:
    """Index chunks of size ``m``: seeded shuffle, then contiguous slices.

    A single chunk keeps the batch order untouched.
    """
    if n < 1:
        raise de.UsageError("empty batch")
    m = n if m is None else min(int(m), n)
    if m >= n:
        return [np.arange(n)]
    order = np.random.default_rng([seed, step]).permutation(n)
    return [order[i:i + m] for i in range(0, n, m)]


def perturb(task: Task, theta, X, y, spec: PerturbationSpec, rho: float, seed) -> PerturbationResult:
    """Dispatch on ``spec.kind`` for one microbatch."""
    if spec.kind == "steepest":
        return steepest_perturb(task, theta, (X, y), rho, spec.asam)
    if spec.kind == "obf":
        return obf_perturb(task, theta, (X, y), spec.obf, rho, spec.asam)
    if spec.kind == "random":
        return random_perturb(np.size(theta), rho, seed)
    return PerturbationResult(np.zeros(np.size(theta)), 0.0, True)


@dataclass
class MSAMOutput:
    sam_grad: np.ndarray
    pert_grad: np.ndarray
    degenerate: int = 0
    microbatches: int = 1


def _random_seed(spec_seed, step, k) -> int:
    return int(np.random.SeedSequence([spec_seed, step, k]).generate_state(1)[0])


def _stacked_grads(task: Task, thetas, Xs, ys, obf: Optional[OBFParams] = None) -> np.ndarray:
    """Per-copy gradients for K same-size microbatches in one graph.

    Row k of the result is the gradient of the mean loss on block k at
    ``thetas[k]``; with ``obf`` set it is the OBF objective's gradient instead.
    """
    K, m = ys.shape
    C = task.model.num_classes
    graph = de.Graph()
    leaf = graph.leaf(thetas)
    z = de.reshape(model_logits(task.model, leaf, Xs), (K * m, C))
    y = ys.ravel()
    if obf is None:
        loss = task_loss(task.loss, z, y)
    else:
        lik = de._sigmoid(z.value) if task.loss.head == "sigmoid" else de._softmax(z.value)
        p = np.clip(lik[np.arange(y.size), y], np.finfo(np.float64).tiny, 1.0)
        alpha = dynamic_alpha(p, obf.gamma, obf.resolve_lam(C))
        objective = sigmoid_obf_objective if task.loss.head == "sigmoid" else obf_objective
        loss = objective(z, y, alpha)
    # the mean over K*m rows times K is the sum of the per-block means
    (grad,) = de.backward(de.scale(loss, K), [leaf])
    return grad


def _group_terms(task: Task, theta, Xs, ys, spec: PerturbationSpec, rho: float, step: int,
                 first: int, need_pert: bool):
    """Perturbed and perturbing gradients for a group of equal-size chunks."""
    K = ys.shape[0]
    d = theta.size
    base = np.broadcast_to(theta, (K, d))
    if spec.kind == "random":
        eps = np.stack([random_perturb(d, rho, _random_seed(spec.seed, step, first + k)).eps
                        for k in range(K)])
        degenerate = np.zeros(K, dtype=bool)
        G = _stacked_grads(task, base, Xs, ys) if need_pert else None
    else:
        G = _stacked_grads(task, base, Xs, ys, spec.obf if spec.kind == "obf" else None)
        eps = np.empty_like(G)
        degenerate = np.empty(K, dtype=bool)
        for k in range(K):
            res = _direction(G[k], theta, rho, spec.asam)
            eps[k], degenerate[k] = res.eps, res.degenerate
    # a degenerate chunk has eps = 0, so its row is the unperturbed task gradient
    sam = _stacked_grads(task, base + eps, Xs, ys)
    return sam, G, degenerate


def msam(task: Task, params, batch, spec: PerturbationSpec, rho: Optional[float] = None,
         step: int = 0, need_pert: bool = False) -> MSAMOutput:
    """Average perturbed task gradients over microbatches.

    With ``need_pert`` the averaged at-theta perturbing gradient (used by GSAM)
    is filled in too; random perturbations fall back to the task gradient there.
    With rho = 0 or kind "none" both are the plain batch gradient.

    Several microbatches of equal size are evaluated together on stacked
    parameter copies; the average still adds them in chunk order.
    """
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = y.shape[0]
    if n == 0:
        raise de.UsageError("empty batch")
    theta = np.asarray(params, dtype=np.float64)
    rho = spec.rho if rho is None else rho
    if spec.kind == "none" or rho == 0:
        g = task.grad(theta, X, y)
        return MSAMOutput(g, g.copy(), 0, 1)

    chunks = microbatch_partition(n, spec.m, spec.seed, step)
    if len(chunks) == 1:
        res = perturb(task, theta, X, y, spec, rho, _random_seed(spec.seed, step, 0))
        if res.degenerate:
            g_task = res.grad if spec.kind == "steepest" else task.grad(theta, X, y)
        else:
            g_task = task.grad(theta + res.eps, X, y)
        pert = np.zeros_like(theta)
        if need_pert:
            pert = res.grad if res.grad is not None else task.grad(theta, X, y)
        return MSAMOutput(g_task, pert, int(res.degenerate), 1)

    # the last chunk may be short; it forms its own group
    groups = [(0, len(chunks))]
    if chunks[-1].size != chunks[0].size:
        groups = [(0, len(chunks) - 1), (len(chunks) - 1, len(chunks))]
    sam_rows, pert_rows, degenerate = [], [], 0
    for lo, hi in groups:
        idx = np.stack(chunks[lo:hi])
        sam, G, degen = _group_terms(task, theta, X[idx], y[idx], spec, rho, step, lo, need_pert)
        sam_rows.extend(sam)
        if need_pert:
            pert_rows.extend(G)
        degenerate += int(degen.sum())
    sam_sum = np.zeros_like(theta)
    pert_sum = np.zeros_like(theta)
    for k in range(len(chunks)):
        sam_sum += sam_rows[k]
        if need_pert:
            pert_sum += pert_rows[k]
    count = len(chunks)
    return MSAMOutput(sam_sum / count, pert_sum / count, degenerate, count)


def msam_gradient(task: Task, params, batch, spec: PerturbationSpec, rho: Optional[float] = None,
                  step: int = 0, diagnostics: Optional[dict] = None) -> ParameterVector:
    """m-SAM update gradient as a :class:`ParameterVector` shaped like ``params``."""
    out = msam(task, params, batch, spec, rho, step)
    if diagnostics is not None:
        diagnostics["degenerate"] = diagnostics.get("degenerate", 0) + out.degenerate
        diagnostics["microbatches"] = out.microbatches
    if isinstance(params, ParameterVector):
        return params.with_values(out.sam_grad)
    return ParameterVector.flat(out.sam_grad)
