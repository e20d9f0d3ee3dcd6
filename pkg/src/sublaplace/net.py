"""Fully connected ReLU networks over a flat parameter vector.

The flat layout is the single source of truth for parameter ordering: all
weight matrices first (layer-major, row-major within a layer), then all bias
vectors (layer-major). Flat indices below ``arch.n_weights`` are therefore
always weights, which is what inference masks select from by default.

Gradients and Jacobians are computed by hand-rolled reverse-mode sweeps; the
Jacobian of an O-output network costs O backward passes. The ReLU derivative
at exactly zero is defined as zero.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch
from .rng import derive_rng


@dataclass(frozen=True)
class MlpArchitecture:
    """Shape of a fully connected ReLU network (linear output layer)."""

    input_dim: int
    hidden_widths: tuple
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise DimensionMismatch(f"all layer dimensions must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1

    @property
    def layer_shapes(self):
        """(fan_out, fan_in) per layer; layer l maps a_{l-1} -> W_l a_{l-1} + b_l."""
        dims = self.layer_dims
        return tuple((dims[i + 1], dims[i]) for i in range(self.n_layers))

    @property
    def n_weights(self) -> int:
        return int(sum(o * i for o, i in self.layer_shapes))

    @property
    def n_biases(self) -> int:
        return int(sum(o for o, _ in self.layer_shapes))

    @property
    def n_params(self) -> int:
        return self.n_weights + self.n_biases

    def n_weights_equal_width(self) -> int:
        """Closed-form count (i+1)*w + (h-1)*w**2 for equal-width single-output nets.

        Equals :attr:`n_weights` when output_dim == 1 and all hidden widths match.
        """
        if self.output_dim != 1 or len(set(self.hidden_widths)) != 1:
            raise ValueError("closed-form count requires equal widths and a single output")
        w = self.hidden_widths[0]
        h = len(self.hidden_widths)
        return (self.input_dim + 1) * w + (h - 1) * w * w

    def layer_weight_slice(self, layer: int) -> slice:
        shapes = self.layer_shapes
        start = sum(o * i for o, i in shapes[:layer])
        o, i = shapes[layer]
        return slice(start, start + o * i)

    def layer_bias_slice(self, layer: int) -> slice:
        shapes = self.layer_shapes
        start = self.n_weights + sum(o for o, _ in shapes[:layer])
        return slice(start, start + shapes[layer][0])

    def weight_indices(self) -> np.ndarray:
        return np.arange(self.n_weights)

    def bias_indices(self) -> np.ndarray:
        return np.arange(self.n_weights, self.n_params)

    def final_layer_weight_indices(self) -> np.ndarray:
        s = self.layer_weight_slice(self.n_layers - 1)
        return np.arange(s.start, s.stop)

    def describe_index(self, flat_index: int):
        """Map a flat index to (layer, kind, row, col); kind is 'weight' or 'bias'."""
        if not 0 <= flat_index < self.n_params:
            raise DimensionMismatch(f"flat index {flat_index} out of range")
        for layer in range(self.n_layers):
            s = self.layer_weight_slice(layer)
            if s.start <= flat_index < s.stop:
                o, i = self.layer_shapes[layer]
                offset = flat_index - s.start
                return (layer, "weight", offset // i, offset % i)
        for layer in range(self.n_layers):
            s = self.layer_bias_slice(layer)
            if s.start <= flat_index < s.stop:
                return (layer, "bias", flat_index - s.start, 0)
        raise AssertionError("unreachable")

    def index_map(self):
        return [self.describe_index(i) for i in range(self.n_params)]


@dataclass(frozen=True)
class WeightVector:
    """Immutable flat parameter vector tied to an architecture."""

    arch: MlpArchitecture
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.arch.n_params:
            raise DimensionMismatch(
                f"expected {self.arch.n_params} parameters, got {v.shape[0]}"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, arch: MlpArchitecture) -> "WeightVector":
        return cls(arch, np.zeros(arch.n_params))

    @classmethod
    def from_layers(cls, arch: MlpArchitecture, weights, biases) -> "WeightVector":
        flat = np.concatenate(
            [np.asarray(w, dtype=np.float64).reshape(-1) for w in weights]
            + [np.asarray(b, dtype=np.float64).reshape(-1) for b in biases]
        )
        return cls(arch, flat)

    def to_layers(self):
        ws, bs = [], []
        for layer, (o, i) in enumerate(self.arch.layer_shapes):
            ws.append(self.values[self.arch.layer_weight_slice(layer)].reshape(o, i))
            bs.append(self.values[self.arch.layer_bias_slice(layer)])
        return ws, bs

    def replace_values(self, values: np.ndarray) -> "WeightVector":
        return WeightVector(self.arch, values)


def he_init(arch: MlpArchitecture, seed: int) -> WeightVector:
    """Zero-mean Gaussian weights with variance 2/fan_in; zero biases."""
    rng = derive_rng(seed, "init")
    weights = [
        rng.normal(0.0, np.sqrt(2.0 / i), size=(o, i)) for o, i in arch.layer_shapes
    ]
    biases = [np.zeros(o) for o, _ in arch.layer_shapes]
    return WeightVector.from_layers(arch, weights, biases)


def _forward_cached(ws, bs, x_batch):
    """Return (pre-activations, activations); activations[0] is the input."""
    pre = []
    acts = [x_batch]
    a = x_batch
    n_layers = len(ws)
    for layer, (w, b) in enumerate(zip(ws, bs)):
        z = a @ w.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if layer < n_layers - 1 else z
        acts.append(a)
    return pre, acts


def forward_batch(arch: MlpArchitecture, w: WeightVector, x_batch: np.ndarray) -> np.ndarray:
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 2 or x_batch.shape[1] != arch.input_dim:
        raise DimensionMismatch(
            f"expected inputs of shape (n, {arch.input_dim}), got {x_batch.shape}"
        )
    ws, bs = w.to_layers()
    _, acts = _forward_cached(ws, bs, x_batch)
    return acts[-1]


def forward(arch: MlpArchitecture, w: WeightVector, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != arch.input_dim:
        raise DimensionMismatch(f"expected input of length {arch.input_dim}, got {x.shape[0]}")
    return forward_batch(arch, w, x[None, :])[0]


def backprop_batch(
    arch: MlpArchitecture, w: WeightVector, x_batch: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Gradient of sum_n upstream_n . f(x_n) with respect to the flat parameters."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (x_batch.shape[0], arch.output_dim):
        raise DimensionMismatch(
            f"upstream shape {upstream.shape} does not match "
            f"({x_batch.shape[0]}, {arch.output_dim})"
        )
    ws, bs = w.to_layers()
    pre, acts = _forward_cached(ws, bs, x_batch)
    grad = np.zeros(arch.n_params)
    delta = upstream
    for layer in range(arch.n_layers - 1, -1, -1):
        grad[arch.layer_weight_slice(layer)] = (delta.T @ acts[layer]).reshape(-1)
        grad[arch.layer_bias_slice(layer)] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ ws[layer]) * (pre[layer - 1] > 0.0)
    return grad


def grad_params(
    arch: MlpArchitecture, w: WeightVector, x: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Gradient of upstream . f(x) with respect to the flat parameters."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if x.shape[0] != arch.input_dim:
        raise DimensionMismatch(f"expected input of length {arch.input_dim}, got {x.shape[0]}")
    if upstream.shape[0] != arch.output_dim:
        raise DimensionMismatch(
            f"expected upstream of length {arch.output_dim}, got {upstream.shape[0]}"
        )
    return backprop_batch(arch, w, x[None, :], upstream[None, :])


@dataclass(frozen=True)
class Jacobian:
    """Rows are outputs, columns the selected flat parameter indices."""

    matrix: np.ndarray
    column_indices: np.ndarray


def _mask_indices(arch: MlpArchitecture, mask) -> np.ndarray:
    if mask is None:
        return np.arange(arch.n_params)
    indices = np.asarray(getattr(mask, "selected", mask), dtype=np.int64).reshape(-1)
    if indices.size == 0:
        raise DimensionMismatch("mask selects no parameters")
    if indices.min() < 0 or indices.max() >= arch.n_params:
        raise DimensionMismatch("mask indices out of range for this architecture")
    return indices


def jacobian_batch(
    arch: MlpArchitecture, w: WeightVector, x_batch: np.ndarray, mask=None
):
    """Per-input Jacobians d f / d params, columns restricted to ``mask``.

    Returns (array of shape (n, output_dim, k), column flat indices). One
    reverse sweep per output row; masking slices columns from the full sweep
    so restricted Jacobians are bitwise-identical to restricted full ones.
    """
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 2 or x_batch.shape[1] != arch.input_dim:
        raise DimensionMismatch(
            f"expected inputs of shape (n, {arch.input_dim}), got {x_batch.shape}"
        )
    indices = _mask_indices(arch, mask)
    ws, bs = w.to_layers()
    pre, acts = _forward_cached(ws, bs, x_batch)
    n = x_batch.shape[0]
    full = np.zeros((n, arch.output_dim, arch.n_params))
    for out in range(arch.output_dim):
        delta = np.zeros((n, arch.output_dim))
        delta[:, out] = 1.0
        for layer in range(arch.n_layers - 1, -1, -1):
            dw = np.einsum("ni,nj->nij", delta, acts[layer])
            full[:, out, arch.layer_weight_slice(layer)] = dw.reshape(n, -1)
            full[:, out, arch.layer_bias_slice(layer)] = delta
            if layer > 0:
                delta = (delta @ ws[layer]) * (pre[layer - 1] > 0.0)
    return full[:, :, indices], indices


def jacobian(arch: MlpArchitecture, w: WeightVector, x: np.ndarray, mask=None) -> Jacobian:
    """Jacobian of the outputs with respect to the selected parameters at ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != arch.input_dim:
        raise DimensionMismatch(f"expected input of length {arch.input_dim}, got {x.shape[0]}")
    mat, indices = jacobian_batch(arch, w, x[None, :], mask)
    return Jacobian(matrix=mat[0], column_indices=indices)


def save_checkpoint(
    path,
    arch: MlpArchitecture,
    weights: WeightVector,
    noise_log_variance,
    seed: int,
    training_meta=None,
):
    """Write a JSON checkpoint; float round-trips are lossless."""
    doc = {
        "architecture": {
            "input_dim": arch.input_dim,
            "hidden_widths": list(arch.hidden_widths),
            "output_dim": arch.output_dim,
            "activation": arch.activation,
        },
        "weights": weights.values.tolist(),
        "noise_log_variance": noise_log_variance,
        "seed": int(seed),
        "training_meta": training_meta or {},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (arch, WeightVector, noise_log_variance, seed, meta)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    a = doc["architecture"]
    arch = MlpArchitecture(
        input_dim=int(a["input_dim"]),
        hidden_widths=tuple(a["hidden_widths"]),
        output_dim=int(a["output_dim"]),
        activation=a.get("activation", "relu"),
    )
    weights = WeightVector(arch, np.asarray(doc["weights"], dtype=np.float64))
    nlv = doc["noise_log_variance"]
    return arch, weights, nlv, int(doc["seed"]), doc.get("training_meta", {})
