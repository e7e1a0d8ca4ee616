"""MLP encoder ``f`` and projection head ``g`` over flat parameter vectors.

A model is nothing more than a :class:`ParameterVector`: the architecture plus
one float64 vector holding every weight and bias. Layers are unpacked as views
into that vector, so aggregation and optimisation work on the flat form.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .numcore import l2_normalize_rows, l2_normalize_rows_backward

CHECKPOINT_FORMAT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    input_dim: int
    encoder_hidden_dims: Tuple[int, ...] = (64,)
    representation_dim: int = 32
    projection_hidden_dims: Tuple[int, ...] = (32,)
    projection_dim: int = 16
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden_dims", tuple(int(d) for d in self.encoder_hidden_dims))
        object.__setattr__(self, "projection_hidden_dims", tuple(int(d) for d in self.projection_hidden_dims))
        dims = [self.input_dim, self.representation_dim, self.projection_dim,
                *self.encoder_hidden_dims, *self.projection_hidden_dims]
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1: {self}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def encoder_dims(self) -> List[int]:
        return [self.input_dim, *self.encoder_hidden_dims, self.representation_dim]

    @property
    def head_dims(self) -> List[int]:
        return [self.representation_dim, *self.projection_hidden_dims, self.projection_dim]

    def layer_shapes(self) -> List[Tuple[int, int]]:
        enc, head = self.encoder_dims, self.head_dims
        return list(zip(enc[:-1], enc[1:])) + list(zip(head[:-1], head[1:]))

    @property
    def n_encoder_layers(self) -> int:
        return len(self.encoder_dims) - 1

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden_dims"] = list(self.encoder_hidden_dims)
        d["projection_hidden_dims"] = list(self.projection_hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


@dataclass
class ParameterVector:
    values: np.ndarray
    spec: ArchitectureSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.spec.param_count:
            raise ShapeMismatch(
                f"parameter vector has {self.values.size} entries, architecture needs {self.spec.param_count}"
            )

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.spec)

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.values.tobytes()).hexdigest()


@dataclass
class ModelOutput:
    h: np.ndarray
    z: np.ndarray
    z_tilde: np.ndarray


@dataclass
class _Cache:
    """Pre-activations and activations kept for the backward pass."""

    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)


def unflatten(values: np.ndarray, spec: ArchitectureSpec) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``(W, b)`` views, ``W`` shaped ``(fan_in, fan_out)``."""
    values = np.asarray(values)
    if values.size != spec.param_count:
        raise ShapeMismatch(f"expected {spec.param_count} parameters, got {values.size}")
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        w = values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = values[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def flatten(layers: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.reshape(-1), b.reshape(-1)]) for w, b in layers])


def init_model(spec: ArchitectureSpec, seed: int) -> ParameterVector:
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in spec.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return ParameterVector(flatten(layers), spec)


def _check_inputs(params: ParameterVector, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ShapeMismatch(f"inputs of shape {x.shape} do not match input_dim={params.spec.input_dim}")
    return x


def _run(params: ParameterVector, x: np.ndarray, stop_after_encoder: bool = False):
    spec = params.spec
    layers = unflatten(params.values, spec)
    cache = _Cache()
    n_enc = spec.n_encoder_layers
    a = x
    h = None
    for k, (w, b) in enumerate(layers):
        if k == n_enc:
            if stop_after_encoder:
                break
        cache.inputs.append(a)
        pre = a @ w + b
        cache.pre.append(pre)
        last_of_stage = k == n_enc - 1 or k == len(layers) - 1
        a = pre if last_of_stage else np.maximum(pre, 0.0)
        if k == n_enc - 1:
            h = a
    z = a if not stop_after_encoder else None
    return h, z, cache, layers


def encode(params: ParameterVector, inputs) -> np.ndarray:
    """Representations ``h = f(x)`` only."""
    x = _check_inputs(params, inputs)
    h, _, _, _ = _run(params, x, stop_after_encoder=True)
    return h


def forward_raw(params: ParameterVector, inputs) -> Tuple[np.ndarray, np.ndarray]:
    """``(h, z)`` without normalisation."""
    x = _check_inputs(params, inputs)
    h, z, _, _ = _run(params, x)
    return h, z


def forward(params: ParameterVector, inputs) -> ModelOutput:
    h, z = forward_raw(params, inputs)
    return ModelOutput(h=h, z=z, z_tilde=l2_normalize_rows(z))


def backward(
    params: ParameterVector,
    inputs,
    grad_h: Optional[np.ndarray] = None,
    grad_z: Optional[np.ndarray] = None,
    grad_z_tilde: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of ``<grad_h, h> + <grad_z, z> + <grad_z_tilde, z_tilde>`` w.r.t. the flat parameters.

    Any of the three upstream gradients may be omitted (treated as zero).
    """
    x = _check_inputs(params, inputs)
    spec = params.spec
    h, z, cache, layers = _run(params, x)
    n = x.shape[0]
    for name, g, ref in (("grad_h", grad_h, h), ("grad_z", grad_z, z), ("grad_z_tilde", grad_z_tilde, z)):
        if g is not None and np.shape(g) != ref.shape:
            raise ShapeMismatch(f"{name} has shape {np.shape(g)}, expected {ref.shape}")

    dz = np.zeros((n, spec.projection_dim)) if grad_z is None else np.array(grad_z, dtype=np.float64)
    if grad_z_tilde is not None:
        dz += l2_normalize_rows_backward(z, np.asarray(grad_z_tilde, dtype=np.float64))

    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    n_enc = spec.n_encoder_layers
    delta = dz
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        last_of_stage = k == n_enc - 1 or k == len(layers) - 1
        if k == n_enc - 1 and grad_h is not None:
            delta = delta + np.asarray(grad_h, dtype=np.float64)
        if not last_of_stage:
            delta = delta * (cache.pre[k] > 0)
        grads[k] = (cache.inputs[k].T @ delta, delta.sum(axis=0))
        if k > 0:
            delta = delta @ w.T
    return flatten(grads)


def iter_layer_slices(spec: ArchitectureSpec) -> Iterator[Tuple[slice, slice]]:
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        w = slice(offset, offset + fan_in * fan_out)
        offset += fan_in * fan_out
        yield w, slice(offset, offset + fan_out)
        offset += fan_out


def save_checkpoint(path, params: ParameterVector, round_index: int, seed: int, extra: Optional[dict] = None) -> None:
    # repr() of a Python float is shortest round-trip, so JSON keeps every bit.
    record = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": params.spec.to_dict(),
        "values": [float(v) for v in params.values],
        "round": int(round_index),
        "seed": int(seed),
    }
    if extra:
        record["extra"] = extra
    Path(path).write_text(json.dumps(record))


def load_checkpoint(path) -> Tuple[ParameterVector, dict]:
    try:
        record = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if record.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {record.get('format_version')!r}")
    try:
        spec = ArchitectureSpec.from_dict(record["architecture"])
        params = ParameterVector(np.array(record["values"], dtype=np.float64), spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    meta = {k: record[k] for k in ("round", "seed") if k in record}
    meta.update(record.get("extra", {}))
    return params, meta
