"""Synthetic classification tasks, a CSV loader, and seeded batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np


class DataFormatError(ValueError):
    pass


class DataConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    num_classes: Optional[int] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DataFormatError(f"features {X.shape} do not match labels {y.shape}")
        if not np.all(np.isfinite(X)):
            raise DataFormatError("features contain non-finite values")
        C = self.num_classes if self.num_classes is not None else (int(y.max()) + 1 if y.size else 0)
        if y.size and (y.min() < 0 or y.max() >= C):
            raise DataFormatError(f"labels must lie in [0, {C})")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "num_classes", C)

    def __len__(self):
        return self.y.size

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx])


@dataclass(frozen=True)
class SpuriousConfig:
    n_train: int = 2000
    n_test: int = 2000
    core_dim: int = 8
    spurious_dim: int = 8
    margin: float = 1.0
    q: float = 0.95
    noise: float = 0.7

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise DataConfigError("split sizes must be positive")
        if self.core_dim < 1 or self.spurious_dim < 1:
            raise DataConfigError("feature dimensions must be positive")
        if self.margin <= 0:
            raise DataConfigError("margin must be positive")
        if not 0.5 <= self.q <= 1.0:
            raise DataConfigError("q must lie in [0.5, 1]")
        if self.noise < 0:
            raise DataConfigError("noise must be non-negative")


def _unit(rng, d):
    u = rng.standard_normal(d)
    return u / np.linalg.norm(u)


def gen_spurious(cfg: SpuriousConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Two-class task whose spurious channel agrees with the label w.p. q on train, 1/2 on test.

    Columns ``[:core_dim]`` carry the core signal, the rest the spurious one.
    """
    rng = np.random.default_rng(seed)
    u_core = _unit(rng, cfg.core_dim)
    u_sp = _unit(rng, cfg.spurious_dim)

    def split(n, agree, name):
        sign = rng.choice([-1.0, 1.0], size=n)
        s = np.where(rng.random(n) < agree, sign, -sign)
        core = np.outer(sign * cfg.margin, u_core) + cfg.noise * rng.standard_normal((n, cfg.core_dim))
        sp = np.outer(s * cfg.margin, u_sp) + cfg.noise * rng.standard_normal((n, cfg.spurious_dim))
        return Dataset(np.hstack([core, sp]), (sign > 0).astype(np.int64), name, 2)

    return split(cfg.n_train, cfg.q, "train"), split(cfg.n_test, 0.5, "test")


def gen_gaussians(n: int, d: int, C: int, separation: float, seed: int, noise: float = 1.0) -> Dataset:
    """Isotropic Gaussian classes with means at ``separation`` times the simplex vertices e_c."""
    if C < 2 or d < C:
        raise DataConfigError("need 2 <= C <= d")
    rng = np.random.default_rng(seed)
    means = separation * (np.eye(C, d) - np.full((C, d), 1.0 / C) * (np.arange(d) < C))
    y = rng.integers(0, C, size=n)
    X = means[y] + noise * rng.standard_normal((n, d))
    return Dataset(X, y, "train", C)


def standardize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Zero-mean unit-variance scaling fitted on ``train`` only."""
    mu = train.X.mean(axis=0)
    sd = train.X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return tuple(replace(ds, X=(ds.X - mu) / sd) for ds in (train, *others))


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_delimited(path, label_column: Union[int, str] = -1, split: str = "train",
                   num_classes: Optional[int] = None) -> Dataset:
    """Comma-separated numeric file; the first row is a header if any field is non-numeric."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = None
    if not all(_is_number(f) for f in rows[0]):
        header = [h.strip() for h in rows[0]]
        rows = rows[1:]
    width = len(header) if header else len(rows[0])
    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise DataConfigError(f"label column {label_column!r} not found")
        col = header.index(label_column)
    else:
        col = label_column if label_column >= 0 else width + label_column
        if not 0 <= col < width:
            raise DataConfigError(f"label column {label_column} outside {width} columns")
    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        lineno = i + (2 if header else 1)
        if len(row) != width:
            raise DataFormatError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
        for j, field in enumerate(row):
            try:
                values[i, j] = float(field)
            except ValueError:
                raise DataFormatError(f"{path}: row {lineno}, column {j + 1}: cannot parse {field!r}") from None
    labels = values[:, col]
    if np.any(labels != np.round(labels)):
        raise DataFormatError(f"{path}: labels must be integers")
    X = np.delete(values, col, axis=1)
    return Dataset(X, labels.astype(np.int64), split, num_classes)


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Per-epoch shuffled contiguous batches; the final short batch is kept."""
    for idx in batch_indices(len(ds), batch_size, seed, epoch):
        yield ds.X[idx], ds.y[idx]
