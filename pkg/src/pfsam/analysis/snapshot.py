"""Output snapshots: likelihoods of a checkpoint, unperturbed and under perturbation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..io import atomic_write_bytes

SNAPSHOT_FORMAT = "pfsam-snapshot-v1"


class SnapshotFormatError(ValueError):
    pass


@dataclass
class OutputSnapshot:
    epoch: int
    labels: np.ndarray
    unperturbed: np.ndarray
    perturbed: list
    meta: dict = field(default_factory=dict)
    head: str = "softmax"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.unperturbed = np.asarray(self.unperturbed, dtype=np.float64)
        self.perturbed = [np.asarray(p, dtype=np.float64) for p in self.perturbed]
        self.validate()

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def num_classes(self) -> int:
        return self.unperturbed.shape[1]

    def validate(self) -> None:
        if self.unperturbed.ndim != 2 or self.unperturbed.shape[0] != self.n:
            raise SnapshotFormatError("unperturbed likelihoods must be (n, C)")
        for mat in [self.unperturbed, *self.perturbed]:
            if mat.shape != self.unperturbed.shape:
                raise SnapshotFormatError("ensemble matrices must match the unperturbed shape")
            if not np.all(np.isfinite(mat)) or mat.min() < 0 or mat.max() > 1:
                raise SnapshotFormatError("likelihoods must lie in [0, 1]")
            if self.head == "softmax" and np.any(np.abs(mat.sum(axis=1) - 1) > 1e-9):
                raise SnapshotFormatError("softmax rows must sum to 1")
        if self.n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise SnapshotFormatError("labels out of range")


def save_snapshot(snap: OutputSnapshot, path) -> None:
    """JSON header line, then int64 labels, then (1 + K) float64 n x C blocks (little-endian)."""
    header = {
        "format": SNAPSHOT_FORMAT,
        "epoch": int(snap.epoch),
        "C": int(snap.num_classes),
        "n": int(snap.n),
        "ensemble": len(snap.perturbed),
        "head": snap.head,
        "m": snap.meta.get("m"),
        "kind": snap.meta.get("kind"),
        "seed": snap.meta.get("seed"),
        "meta": snap.meta,
    }
    parts = [json.dumps(header, sort_keys=True).encode("utf-8") + b"\n",
             np.ascontiguousarray(snap.labels, dtype="<i8").tobytes()]
    for mat in [snap.unperturbed, *snap.perturbed]:
        parts.append(np.ascontiguousarray(mat, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_snapshot(path) -> OutputSnapshot:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise SnapshotFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotFormatError(f"{path}: bad header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != SNAPSHOT_FORMAT:
        raise SnapshotFormatError(f"{path}: not a snapshot file")
    try:
        n, C, K = int(header["n"]), int(header["C"]), int(header["ensemble"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotFormatError(f"{path}: incomplete header") from exc
    body = raw[nl + 1:]
    expected = 8 * n + 8 * n * C * (1 + K)
    if len(body) != expected:
        raise SnapshotFormatError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    labels = np.frombuffer(body[:8 * n], dtype="<i8").astype(np.int64)
    mats = np.frombuffer(body[8 * n:], dtype="<f8").astype(np.float64).reshape(1 + K, n, C)
    try:
        return OutputSnapshot(
            epoch=header["epoch"],
            labels=labels,
            unperturbed=mats[0],
            perturbed=list(mats[1:]),
            meta=header.get("meta") or {},
            head=header.get("head", "softmax"),
        )
    except SnapshotFormatError as exc:
        raise SnapshotFormatError(f"{path}: {exc}") from exc
