"""Minimal MLP substrate: forward, cross-entropy, analytic gradients, SGD.

All math runs in float64 and every operation is a pure function of its
inputs, so trajectories are reproducible bit for bit. Parameters live in a
single flat vector (per layer: row-major weight matrix, then bias).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, DataError, EvaluationError, ShapeError, StateError
from .seeding import TAG_INIT, stream

ACTIVATIONS = ("relu",)

CHECKPOINT_MAGIC = "fedsim-model v1"


@dataclass(frozen=True)
class ModelArch:
    """Fully connected architecture; hidden layers use ReLU, output is raw logits."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ConfigError("architecture needs at least input and output widths")
        if any(w < 1 for w in widths):
            raise ConfigError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]


def param_count(arch: ModelArch) -> int:
    widths = arch.layer_widths
    return sum(w_in * w_out + w_out for w_in, w_out in zip(widths[:-1], widths[1:]))


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector bound to its architecture."""

    arch: ModelArch
    values: np.ndarray

    def __post_init__(self) -> None:
        # private copy so freezing never touches the caller's array
        vals = np.array(self.values, dtype=np.float64, order="C").ravel()
        expected = param_count(self.arch)
        if vals.size != expected:
            raise ShapeError(f"expected {expected} parameters, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise StateError("parameters must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class Batch:
    """One minibatch of features and integer labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        feats = np.array(self.features, dtype=np.float64, order="C")
        labs = np.array(self.labels, dtype=np.int64, order="C")
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ShapeError("batch features must be a nonempty 2-d matrix")
        if labs.shape != (feats.shape[0],):
            raise ShapeError("batch labels must match the number of feature rows")
        if not np.all(np.isfinite(feats)):
            raise DataError("batch features must be finite")
        if labs.min() < 0:
            raise DataError("batch labels must be nonnegative")
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)


@dataclass(frozen=True)
class OptimizerState:
    """Momentum-SGD state; weight decay is folded into the raw gradient."""

    momentum_buffer: np.ndarray
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        buf = np.array(self.momentum_buffer, dtype=np.float64, order="C").ravel()
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        buf.setflags(write=False)
        object.__setattr__(self, "momentum_buffer", buf)


def init_optimizer(
    model: ParamVector, lr: float, momentum: float = 0.0, weight_decay: float = 0.0
) -> OptimizerState:
    return OptimizerState(
        momentum_buffer=np.zeros(len(model)),
        lr=lr,
        momentum=momentum,
        weight_decay=weight_decay,
    )


def _layer_slices(arch: ModelArch):
    """Yield (weight_slice, bias_slice, in_width, out_width) per layer."""
    offset = 0
    widths = arch.layer_widths
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        w_sl = slice(offset, offset + w_in * w_out)
        offset += w_in * w_out
        b_sl = slice(offset, offset + w_out)
        offset += w_out
        yield w_sl, b_sl, w_in, w_out


def unpack(arch: ModelArch, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Flat vector -> [(W, b), ...] views, W shaped (in, out)."""
    return [
        (values[w_sl].reshape(w_in, w_out), values[b_sl])
        for w_sl, b_sl, w_in, w_out in _layer_slices(arch)
    ]


def init_model(arch: ModelArch, seed: int) -> ParamVector:
    """Seeded Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = stream(TAG_INIT, seed)
    values = np.zeros(param_count(arch))
    for w_sl, _b_sl, w_in, w_out in _layer_slices(arch):
        bound = np.sqrt(6.0 / (w_in + w_out))
        values[w_sl] = rng.uniform(-bound, bound, size=w_in * w_out)
    return ParamVector(arch, values)


def _forward_raw(arch: ModelArch, values: np.ndarray, features: np.ndarray) -> np.ndarray:
    if features.shape[1] != arch.input_dim:
        raise ShapeError(
            f"features have {features.shape[1]} columns, architecture expects {arch.input_dim}"
        )
    layers = unpack(arch, values)
    act = features
    for weight, bias in layers[:-1]:
        act = np.maximum(act @ weight + bias, 0.0)
    weight, bias = layers[-1]
    return act @ weight + bias


def forward(model: ParamVector, batch: Batch) -> np.ndarray:
    """Logits matrix, shape (batch_size, output_dim)."""
    return _forward_raw(model.arch, model.values, batch.features)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> None:
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("logits must be 2-d with one label per row")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError(f"labels must lie in [0, {logits.shape[1]})")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy, stabilized by max-subtraction."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(logits, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(labels.size), labels]
    return float(np.mean(log_norm - picked))


def backward(model: ParamVector, batch: Batch) -> np.ndarray:
    """Analytic gradient of the mean cross-entropy w.r.t. every parameter.

    Standard backprop: output delta is (softmax - onehot)/batch_size, hidden
    deltas are masked by the ReLU pre-activation sign.
    """
    arch = model.arch
    layers = unpack(arch, model.values)
    labels = batch.labels
    if labels.max() >= arch.output_dim:
        raise DataError(f"labels must lie in [0, {arch.output_dim})")

    activations = [batch.features]
    pre_acts = []
    act = batch.features
    for weight, bias in layers[:-1]:
        pre = act @ weight + bias
        pre_acts.append(pre)
        act = np.maximum(pre, 0.0)
        activations.append(act)
    weight, bias = layers[-1]
    logits = act @ weight + bias

    n = batch.features.shape[0]
    delta = softmax(logits)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grad = np.zeros_like(model.values)
    grad_layers = unpack(arch, grad)
    for li in range(len(layers) - 1, -1, -1):
        g_weight, g_bias = grad_layers[li]
        g_weight[:] = activations[li].T @ delta
        g_bias[:] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ layers[li][0].T) * (pre_acts[li - 1] > 0.0)
    return grad


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    """Central finite differences of a scalar function, coordinate by coordinate."""
    if step <= 0:
        raise ConfigError("finite-difference step must be > 0")
    grad = np.zeros_like(x, dtype=np.float64)
    probe = x.astype(np.float64).copy()
    for i in range(x.size):
        orig = probe[i]
        probe[i] = orig + step
        hi = fn(probe)
        probe[i] = orig - step
        lo = fn(probe)
        probe[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def finite_diff_grad(model: ParamVector, batch: Batch, step: float = 1e-3) -> np.ndarray:
    """Independent numeric oracle for backward()."""
    arch = model.arch

    def loss_at(values: np.ndarray) -> float:
        return cross_entropy(_forward_raw(arch, values, batch.features), batch.labels)

    return central_difference(loss_at, model.values, step)


def sgd_step(
    model: ParamVector, gradient: np.ndarray, opt: OptimizerState
) -> tuple[ParamVector, OptimizerState]:
    """One momentum-SGD update; returns the new model and optimizer state."""
    gradient = np.asarray(gradient, dtype=np.float64).ravel()
    if gradient.size != len(model) or opt.momentum_buffer.size != len(model):
        raise ShapeError("gradient and momentum buffer must match the model length")
    buf = opt.momentum * opt.momentum_buffer + gradient + opt.weight_decay * model.values
    new_values = model.values - opt.lr * buf
    return ParamVector(model.arch, new_values), replace(opt, momentum_buffer=buf)


def evaluate_accuracy(model: ParamVector, dataset: LabeledDataset) -> float:
    """Fraction of samples whose argmax logit matches the label.

    Ties resolve to the lowest class index, so accuracy is deterministic.
    """
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate accuracy on an empty dataset")
    num_classes = getattr(dataset, "num_classes", model.arch.output_dim)
    if num_classes > model.arch.output_dim:
        raise EvaluationError(
            f"dataset has {num_classes} classes but the model outputs {model.arch.output_dim}"
        )
    logits = _forward_raw(model.arch, model.values, dataset.features)
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == dataset.labels))


def save_model(model: ParamVector, path) -> None:
    """Checkpoint: ascii header line, then parameters as little-endian doubles."""
    header = f"{CHECKPOINT_MAGIC}; arch={','.join(str(w) for w in model.arch.layer_widths)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(model.values.astype("<f8").tobytes())


def load_model(path) -> ParamVector:
    with open(path, "rb") as fh:
        blob = fh.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise DataError(f"{path}: missing checkpoint header")
    header = blob[:newline].decode("ascii", errors="replace")
    prefix = f"{CHECKPOINT_MAGIC}; arch="
    if not header.startswith(prefix):
        raise DataError(f"{path}: unrecognized checkpoint header {header!r}")
    try:
        widths = tuple(int(tok) for tok in header[len(prefix) :].split(","))
    except ValueError:
        raise DataError(f"{path}: malformed arch in checkpoint header") from None
    arch = ModelArch(widths)
    payload = blob[newline + 1 :]
    expected = 8 * param_count(arch)
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8")
    return ParamVector(arch, values)
