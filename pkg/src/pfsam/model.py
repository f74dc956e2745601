"""Feedforward classifiers on a flat parameter vector, plus checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffengine as de
from .io import atomic_write_bytes, atomic_write_json

CHECKPOINT_MAGIC = b"PFSAMCKP"


class ConfigError(ValueError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple = ()
    activation: str = "relu"
    head_bias_init: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden_dims must be positive")
        if self.activation not in ("relu", "sigmoid"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["head_bias_init"] = float(self.head_bias_init)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def layer_shapes(self) -> list[tuple[str, tuple]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        shapes = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            prefix = "head" if i == len(dims) - 2 else f"hidden{i}"
            shapes.append((f"{prefix}.weight", (fan_in, fan_out)))
            shapes.append((f"{prefix}.bias", (fan_out,)))
        return shapes


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple

    @property
    def extent(self) -> int:
        return int(np.prod(self.shape))


class ParameterVector:
    """Flat float64 vector with a named segment map.

    Segments tile the vector in order. ``np.asarray(pv)`` yields the values.
    """

    def __init__(self, values, segments: Sequence[Segment]):
        self.values = np.array(values, dtype=np.float64).ravel()
        self.segments = tuple(segments)
        offset = 0
        names = set()
        for seg in self.segments:
            if seg.offset != offset:
                raise ValueError(f"segment {seg.name} at {seg.offset}, expected {offset}")
            if seg.name in names:
                raise ValueError(f"duplicate segment {seg.name}")
            names.add(seg.name)
            offset += seg.extent
        if offset != self.values.size:
            raise ValueError(f"segments cover {offset} of {self.values.size} values")

    @classmethod
    def flat(cls, values, name="theta"):
        values = np.asarray(values, dtype=np.float64).ravel()
        return cls(values, [Segment(name, 0, (values.size,))])

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParameterVector(d={self.values.size}, segments={[s.name for s in self.segments]})"

    def segment(self, name: str) -> np.ndarray:
        """Writable view of one segment in its natural shape."""
        for seg in self.segments:
            if seg.name == name:
                return self.values[seg.offset:seg.offset + seg.extent].reshape(seg.shape)
        raise KeyError(name)

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.segments)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.segments)

    def segments_dict(self) -> dict:
        return {s.name: [s.offset, list(s.shape)] for s in self.segments}


def layout(config: ModelConfig) -> list[Segment]:
    segs, offset = [], 0
    for name, shape in config.layer_shapes():
        segs.append(Segment(name, offset, shape))
        offset += int(np.prod(shape))
    return segs


def num_params(config: ModelConfig) -> int:
    return sum(s.extent for s in layout(config))


def init(config: ModelConfig, seed: int) -> ParameterVector:
    """Glorot-uniform weights, zero biases, head bias set to ``head_bias_init``."""
    rng = np.random.default_rng(seed)
    segs = layout(config)
    values = np.zeros(sum(s.extent for s in segs))
    for seg in segs:
        view = values[seg.offset:seg.offset + seg.extent]
        if seg.name.endswith(".weight"):
            fan_in, fan_out = seg.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            view[:] = rng.uniform(-bound, bound, size=seg.extent)
        elif seg.name == "head.bias":
            view[:] = config.head_bias_init
    return ParameterVector(values, segs)


def logits(config: ModelConfig, theta: de.Var, X) -> de.Var:
    """Logits for inputs ``X`` with parameters ``theta`` (a flat Var).

    A stacked ``theta`` of shape (K, d) with ``X`` of shape (K, m, input_dim)
    evaluates K independent parameter copies, copy k on block ``X[k]``.
    """
    X = np.asarray(X, dtype=np.float64)
    stacked = theta.value.ndim == 2
    if X.ndim != (3 if stacked else 2) or X.shape[-1] != config.input_dim:
        raise de.UsageError(f"inputs of shape {X.shape} do not fit input_dim {config.input_dim}")
    if stacked and X.shape[0] != theta.shape[0]:
        raise de.UsageError("stacked parameters and input blocks disagree in count")
    if not np.all(np.isfinite(X)):
        raise de.UsageError("inputs contain non-finite values")
    act = de.relu if config.activation == "relu" else de.sigmoid
    h = theta.graph.constant(X)
    shapes = config.layer_shapes()
    offset = 0
    for i in range(0, len(shapes), 2):
        (_, wshape), (_, bshape) = shapes[i], shapes[i + 1]
        W = de.segment(theta, offset, wshape)
        offset += int(np.prod(wshape))
        b = de.segment(theta, offset, bshape)
        offset += int(np.prod(bshape))
        if stacked:
            b = de.reshape(b, (b.shape[0], 1, b.shape[1]))
        h = de.add(de.matmul(h, W), b)
        if i + 2 < len(shapes):
            h = act(h)
    return h


def forward(config: ModelConfig, params, X, graph: Optional[de.Graph] = None):
    """Build a graph rooted at ``params`` and return ``(graph, leaf, logits)``."""
    graph = graph or de.Graph()
    leaf = graph.leaf(np.asarray(params))
    return graph, leaf, logits(config, leaf, X)


def predict_logits(config: ModelConfig, params, X) -> np.ndarray:
    graph = de.Graph()
    leaf = graph.leaf(np.asarray(params))
    with graph.paused():
        return logits(config, leaf, X).value


def likelihoods(config: ModelConfig, params, X, head: str = "softmax") -> np.ndarray:
    z = predict_logits(config, params, X)
    return de._sigmoid(z) if head == "sigmoid" else de._softmax(z)


def accuracy(config: ModelConfig, params, X, y) -> float:
    z = predict_logits(config, params, X)
    return float(np.mean(np.argmax(z, axis=1) == np.asarray(y)))


# --- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ParameterVector
    config: ModelConfig
    step: int = 0
    seed: int = 0
    optimizer: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save(cp: Checkpoint, path) -> None:
    values = np.ascontiguousarray(cp.params.values, dtype="<f8")
    blob = CHECKPOINT_MAGIC + struct.pack("<Q", values.size) + values.tobytes()
    meta = {
        "config": cp.config.to_dict(),
        "config_hash": cp.config.config_hash(),
        "segments": cp.params.segments_dict(),
        "step": int(cp.step),
        "seed": int(cp.seed),
        "optimizer": cp.optimizer,
        "extra": cp.extra,
    }
    atomic_write_bytes(path, blob)
    atomic_write_json(meta_path(path), meta)


def load(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; if ``expected`` is given its hash must match."""
    path = Path(path)
    try:
        meta = json.loads(meta_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"cannot read metadata for {path}: {exc}") from exc
    config = ModelConfig(**meta["config"])
    if config.config_hash() != meta["config_hash"]:
        raise CheckpointFormatError(f"{path}: stored config does not match its hash")
    if expected is not None and expected.config_hash() != meta["config_hash"]:
        raise IncompatibleCheckpoint(
            f"{path}: config hash {meta['config_hash'][:12]} != expected {expected.config_hash()[:12]}"
        )
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic or header")
    (count,) = struct.unpack("<Q", raw[8:16])
    if len(raw) != 16 + 8 * count:
        raise CheckpointFormatError(f"{path}: expected {count} values, file has {(len(raw) - 16) / 8}")
    values = np.frombuffer(raw[16:], dtype="<f8").astype(np.float64)
    segs = [Segment(name, off, tuple(shape)) for name, (off, shape) in meta["segments"].items()]
    segs.sort(key=lambda s: s.offset)
    try:
        params = ParameterVector(values, segs)
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc
    return Checkpoint(
        params=params,
        config=config,
        step=meta["step"],
        seed=meta["seed"],
        optimizer=meta.get("optimizer"),
        extra=meta.get("extra", {}),
    )
