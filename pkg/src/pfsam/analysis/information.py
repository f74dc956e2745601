"""Binned plug-in estimates of I(X; Yhat | Y) and I(Yhat; Y), in bits.

Likelihood vectors are discretized into C-bit codes by thresholding. A sample
observed under several perturbed models carries the empirical distribution of
its codes across that ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_THRESHOLDS = 100
MAX_CLASSES = 62


def default_thresholds(count: int = NUM_THRESHOLDS) -> np.ndarray:
    """t = 10**r for ``count`` values of r spaced evenly on [-12, 0]."""
    return 10.0 ** np.linspace(-12.0, 0.0, count)


def bin_outputs(matrix, t: float) -> np.ndarray:
    """Code per row with bit c set iff matrix[row, c] >= t."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError("expected an (n, C) likelihood matrix")
    C = matrix.shape[1]
    if C > MAX_CLASSES:
        raise ValueError(f"{C} classes exceed the {MAX_CLASSES}-bit code width")
    if not 0.0 < t <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    weights = np.left_shift(np.int64(1), np.arange(C, dtype=np.int64))
    return (matrix >= t).astype(np.int64) @ weights


def _as_2d(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return codes[:, None] if codes.ndim == 1 else codes


def _entropy_from_counts(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def conditional_mi(codes, labels) -> float:
    """Plug-in E_x[ KL(p(Yhat|x) || p(Yhat|y)) ].

    ``codes`` is (n,) for a single model or (n, K) for a K-member ensemble; row i
    is read as the empirical code distribution of sample i. p(Yhat|y) is the
    average of those distributions over the samples labelled y.
    """
    codes = _as_2d(codes)
    labels = np.asarray(labels, dtype=np.int64)
    n, K = codes.shape
    if labels.shape != (n,):
        raise ValueError("labels do not match codes")
    if n == 0:
        return 0.0
    _, code_id = np.unique(codes, return_inverse=True)
    code_id = code_id.reshape(n, K)
    U = int(code_id.max()) + 1
    # per-sample distributions as sparse (sample, code) -> probability
    pair, pair_count = np.unique(np.repeat(np.arange(n), K) * U + code_id.ravel(), return_counts=True)
    sample, code = np.divmod(pair, U)
    p_x = pair_count / K
    _, label_id = np.unique(labels, return_inverse=True)
    class_size = np.bincount(label_id)
    mix = np.zeros((class_size.size, U))
    np.add.at(mix, (label_id[sample], code), p_x / class_size[label_id[sample]])
    kl = p_x * (np.log2(p_x) - np.log2(mix[label_id[sample], code]))
    value = float(np.bincount(sample, weights=kl, minlength=n).sum() / n)
    return max(value, 0.0)


def target_mi(codes, labels) -> float:
    """Plug-in I(Yhat; Y) = H(Yhat) + H(Y) - H(Yhat, Y); ensembles count each draw."""
    codes = _as_2d(codes)
    labels = np.asarray(labels, dtype=np.int64)
    n, K = codes.shape
    if labels.shape != (n,):
        raise ValueError("labels do not match codes")
    if n == 0:
        return 0.0
    flat_codes = codes.ravel()
    flat_labels = np.repeat(labels, K)
    _, c_id = np.unique(flat_codes, return_inverse=True)
    _, y_id = np.unique(flat_labels, return_inverse=True)
    joint = c_id * (y_id.max() + 1) + y_id
    h_c = _entropy_from_counts(np.bincount(c_id))
    h_y = _entropy_from_counts(np.bincount(y_id))
    h_joint = _entropy_from_counts(np.unique(joint, return_counts=True)[1])
    return max(h_c + h_y - h_joint, 0.0)


@dataclass
class MICurve:
    thresholds: np.ndarray
    i_x_yhat_given_y: np.ndarray
    i_yhat_y: np.ndarray


@dataclass
class SnapshotCurves:
    unperturbed: MICurve
    perturbed: MICurve


def curve(matrices, labels, thresholds=None) -> MICurve:
    """MI curve for one model (a single matrix) or an ensemble (list of matrices)."""
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    mats = [np.asarray(matrices)] if np.ndim(matrices) == 2 else [np.asarray(m) for m in matrices]
    cond = np.empty(thresholds.size)
    targ = np.empty(thresholds.size)
    for j, t in enumerate(thresholds):
        codes = np.stack([bin_outputs(m, t) for m in mats], axis=1)
        cond[j] = conditional_mi(codes, labels)
        targ[j] = target_mi(codes, labels)
    return MICurve(thresholds, cond, targ)


def mi_curve(snapshot, thresholds=None) -> SnapshotCurves:
    """Unperturbed (point-mass) and perturbed (ensemble) curves for a snapshot."""
    return SnapshotCurves(
        unperturbed=curve(snapshot.unperturbed, snapshot.labels, thresholds),
        perturbed=curve(list(snapshot.perturbed), snapshot.labels, thresholds),
    )
