"""Small perceptron embedding network ending in a unit-norm layer.

Each layer applies ``linear -> (optional) L2 normalisation -> (optional) ReLU``.
The last layer must normalise and must not rectify, so every emitted
embedding lies on the unit sphere. Inputs may be a single vector or a batch
of row vectors; all tape arrays keep a leading batch axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateNormError, NumericError, ParseError

NORM_EPS = 1e-12

_MAGIC = b"SMCK"
_VERSION = 1
_FLAG_ACT = 1
_FLAG_NORM = 2


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    has_activation: bool = False
    has_normalisation: bool = False


@dataclass
class EmbeddingParams:
    specs: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norm_eps: float = NORM_EPS

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_width

    @property
    def embedding_dim(self) -> int:
        return self.specs[-1].output_width

    def copy(self) -> EmbeddingParams:
        return EmbeddingParams(
            self.specs, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.norm_eps
        )

    def equals(self, other: EmbeddingParams) -> bool:
        return (
            self.specs == other.specs
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


@dataclass
class ForwardTape:
    """Per-layer cache: layer input, linear output, its row norms, normalised output."""

    inputs: list[np.ndarray] = field(default_factory=list)
    linear: list[np.ndarray] = field(default_factory=list)
    norms: list[np.ndarray | None] = field(default_factory=list)
    normalised: list[np.ndarray] = field(default_factory=list)
    single: bool = False


@dataclass
class ParamGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def validate_specs(specs: Sequence[LayerSpec]) -> tuple[LayerSpec, ...]:
    specs = tuple(specs)
    if not specs:
        raise ConfigError("at least one layer is required")
    for i, s in enumerate(specs):
        if s.input_width < 1 or s.output_width < 1:
            raise ConfigError(f"layer {i}: widths must be >= 1, got {s.input_width}->{s.output_width}")
        if i > 0 and specs[i - 1].output_width != s.input_width:
            raise ConfigError(
                f"layer {i} expects width {s.input_width} but layer {i - 1} emits {specs[i - 1].output_width}"
            )
    last = specs[-1]
    if not last.has_normalisation or last.has_activation:
        raise ConfigError("final layer must normalise and must not rectify")
    return specs


def default_specs(input_dim: int, hidden: int = 128, embedding_dim: int = 64,
                  normalise_hidden: bool = False) -> list[LayerSpec]:
    return [
        LayerSpec(input_dim, hidden, has_activation=True, has_normalisation=normalise_hidden),
        LayerSpec(hidden, embedding_dim, has_normalisation=True),
    ]


def init_params(specs: Sequence[LayerSpec], seed: int) -> EmbeddingParams:
    """Glorot-uniform weights, zero biases."""
    specs = validate_specs(specs)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for s in specs:
        limit = np.sqrt(6.0 / (s.input_width + s.output_width))
        weights.append(rng.uniform(-limit, limit, size=(s.output_width, s.input_width)))
        biases.append(np.zeros(s.output_width))
    return EmbeddingParams(specs, weights, biases)


def forward(params: EmbeddingParams, x) -> tuple[np.ndarray, ForwardTape]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != params.input_dim:
        raise ConfigError(f"input width {h.shape[1]} != network input width {params.input_dim}")
    if not np.all(np.isfinite(h)):
        raise NumericError("input contains non-finite values")
    tape = ForwardTape(single=single)
    for spec, w, b in zip(params.specs, params.weights, params.biases):
        tape.inputs.append(h)
        z = h @ w.T + b
        tape.linear.append(z)
        if spec.has_normalisation:
            n = np.sqrt(np.einsum("ij,ij->i", z, z))
            # below the floor the output could not be unit norm
            if np.any(n < params.norm_eps):
                raise DegenerateNormError("normalisation layer received a (near-)zero vector")
            z = z / n[:, None]
            tape.norms.append(n)
        else:
            tape.norms.append(None)
        tape.normalised.append(z)
        h = np.maximum(z, 0.0) if spec.has_activation else z
    if not np.all(np.isfinite(h)):
        raise NumericError("forward pass produced non-finite values")
    return (h[0] if single else h), tape


def forward_batch(params: EmbeddingParams, X) -> np.ndarray:
    """Embed each row of ``X``; row order is preserved."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError("forward_batch expects a 2-d array of inputs")
    if X.shape[0] == 0:
        return np.empty((0, params.embedding_dim))
    return forward(params, X)[0]


def backward(params: EmbeddingParams, tape: ForwardTape, grad_embedding) -> tuple[ParamGrads, np.ndarray]:
    """Reverse-mode pass; parameter gradients are summed over the batch."""
    g = np.asarray(grad_embedding, dtype=np.float64)
    g = np.atleast_2d(g)
    expected = tape.normalised[-1].shape
    if g.shape != expected or len(tape.inputs) != len(params.specs):
        raise ConfigError(f"upstream gradient shape {g.shape} does not match tape {expected}")
    gw: list[np.ndarray] = [None] * len(params.specs)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(params.specs)  # type: ignore[list-item]
    for i in reversed(range(len(params.specs))):
        spec = params.specs[i]
        y = tape.normalised[i]
        if spec.has_activation:
            g = g * (y > 0.0)
        if spec.has_normalisation:
            g = (g - y * np.einsum("ij,ij->i", y, g)[:, None]) / tape.norms[i][:, None]
        gw[i] = g.T @ tape.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    grad_input = g[0] if tape.single else g
    return ParamGrads(gw, gb), grad_input


def sgd_step(params: EmbeddingParams, grads: ParamGrads, lr: float, weight_decay: float = 0.0) -> EmbeddingParams:
    """``w <- w - lr * (g + weight_decay * w)``; biases are not decayed."""
    if lr < 0 or weight_decay < 0:
        raise ConfigError("lr and weight_decay must be non-negative")
    if len(grads.weights) != len(params.weights):
        raise ConfigError("gradient layer count does not match parameters")
    weights, biases = [], []
    for w, b, dw, db in zip(params.weights, params.biases, grads.weights, grads.biases):
        if dw.shape != w.shape or db.shape != b.shape:
            raise ConfigError("gradient shapes do not match parameters")
        weights.append(w - lr * (dw + weight_decay * w))
        biases.append(b - lr * db)
    return EmbeddingParams(params.specs, weights, biases, params.norm_eps)


def save_checkpoint(params: EmbeddingParams, path) -> None:
    """Binary checkpoint; weights and biases stored as little-endian float32."""
    out = bytearray(struct.pack("<4sII", _MAGIC, _VERSION, len(params.specs)))
    for s in params.specs:
        flags = (_FLAG_ACT if s.has_activation else 0) | (_FLAG_NORM if s.has_normalisation else 0)
        out += struct.pack("<IIB", s.input_width, s.output_width, flags)
    for w, b in zip(params.weights, params.biases):
        out += np.ascontiguousarray(w, dtype="<f4").tobytes()
        out += np.ascontiguousarray(b, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> EmbeddingParams:
    data = Path(path).read_bytes()
    head = struct.calcsize("<4sII")
    if len(data) < head:
        raise ParseError("checkpoint header truncated", len(data))
    magic, version, count = struct.unpack_from("<4sII", data, 0)
    if magic != _MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", 0)
    if version != _VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    off = head
    specs = []
    layer = struct.calcsize("<IIB")
    for _ in range(count):
        if off + layer > len(data):
            raise ParseError("layer table truncated", off)
        i, o, flags = struct.unpack_from("<IIB", data, off)
        specs.append(LayerSpec(i, o, bool(flags & _FLAG_ACT), bool(flags & _FLAG_NORM)))
        off += layer
    specs = validate_specs(specs)
    weights, biases = [], []
    for s in specs:
        for shape in ((s.output_width, s.input_width), (s.output_width,)):
            nbytes = 4 * int(np.prod(shape))
            if off + nbytes > len(data):
                raise ParseError("parameter block truncated", off)
            arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
            (weights if len(shape) == 2 else biases).append(arr.astype(np.float64))
            off += nbytes
    if off != len(data):
        raise ParseError("trailing bytes after parameter blocks", off)
    return EmbeddingParams(specs, weights, biases)
