"""Dense feedforward classifier: softmax output, mean cross-entropy, exact backprop.

Everything here is a pure function of its inputs; models are immutable and
updates return new models. All math is float64. The flat parameter layout
(layer 0 weights row-major, layer 0 biases, layer 1 weights, ...) is a frozen
wire format: reordering it breaks every serialized model in flight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIDDEN_ACTIVATIONS = ("sigmoid", "relu", "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}; expected one of {HIDDEN_ACTIVATIONS}")


def _activate_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # derivative expressed via pre-activation z and activation a, whichever is cheaper
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    raise ValueError(f"unknown activation {name!r}")


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class MlpModel:
    """Layered dense network; the output layer always feeds a softmax."""

    layer_sizes: tuple[int, ...]
    hidden_activation: str
    weights: tuple[np.ndarray, ...]  # layer l: (layer_sizes[l], layer_sizes[l+1])
    biases: tuple[np.ndarray, ...]  # layer l: (layer_sizes[l+1],)

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        return param_count(self.layer_sizes)


@dataclass(frozen=True)
class Batch:
    """A labelled sample block: features (n, d) and integer class labels (n,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be a vector with one entry per sample")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        if self.labels.min(initial=0) < 0:
            raise ValueError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Gradients:
    """Per-layer gradients shaped exactly like the model, plus the batch size."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    sample_count: int


def param_count(layer_sizes: tuple[int, ...] | list[int]) -> int:
    return sum(
        fan_in * fan_out + fan_out for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:])
    )


def init_model(
    layer_sizes: list[int] | tuple[int, ...],
    hidden_activation: str = "sigmoid",
    seed: int = 0,
) -> MlpModel:
    """Glorot-uniform weights, zero biases; identical arguments give identical bits."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError("layer_sizes needs at least an input and an output layer")
    if any(s < 1 for s in sizes):
        raise ValueError("every layer size must be >= 1")
    if hidden_activation not in HIDDEN_ACTIVATIONS:
        raise ValueError(f"unknown activation {hidden_activation!r}")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(sizes, hidden_activation, tuple(weights), tuple(biases))


def _check_features(model: MlpModel, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"features have shape {features.shape}; expected (n, {model.layer_sizes[0]})"
        )


def _forward_trace(model: MlpModel, features: np.ndarray):
    """Forward pass keeping pre-activations and activations for backprop."""
    pre = []
    acts = [np.asarray(features, dtype=np.float64)]
    a = acts[0]
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        pre.append(z)
        a = _softmax(z) if l == last else _activate(model.hidden_activation, z)
        acts.append(a)
    return pre, acts


def forward(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per sample; rows sum to 1."""
    _check_features(model, features)
    _, acts = _forward_trace(model, features)
    return acts[-1]


def _check_batch(model: MlpModel, batch: Batch) -> None:
    _check_features(model, batch.features)
    if batch.labels.max() >= model.num_classes:
        raise ValueError(
            f"label {int(batch.labels.max())} out of range for {model.num_classes} classes"
        )


def loss(model: MlpModel, batch: Batch) -> float:
    """Mean cross-entropy: average over samples of -ln p(true class)."""
    _check_batch(model, batch)
    probs = forward(model, batch.features)
    picked = probs[np.arange(len(batch)), batch.labels]
    return float(-np.mean(np.log(picked)))


def gradient(model: MlpModel, batch: Batch) -> Gradients:
    """Exact analytic gradient of `loss` with respect to every parameter."""
    _check_batch(model, batch)
    pre, acts = _forward_trace(model, batch.features)
    n = len(batch)
    delta = acts[-1].copy()
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n
    grad_w: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(model.biases)
    for l in range(len(model.weights) - 1, -1, -1):
        grad_w[l] = acts[l].T @ delta
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l].T) * _activate_grad(
                model.hidden_activation, pre[l - 1], acts[l]
            )
    return Gradients(tuple(grad_w), tuple(grad_b), n)


def _check_shapes(model: MlpModel, grads: Gradients) -> None:
    for w, gw in zip(model.weights, grads.weights):
        if w.shape != gw.shape:
            raise ValueError(f"gradient shape {gw.shape} does not match weights {w.shape}")
    for b, gb in zip(model.biases, grads.biases):
        if b.shape != gb.shape:
            raise ValueError(f"gradient shape {gb.shape} does not match biases {b.shape}")
    if len(model.weights) != len(grads.weights) or len(model.biases) != len(grads.biases):
        raise ValueError("gradient layer count does not match the model")


def sgd_step(model: MlpModel, grads: Gradients, learning_rate: float) -> MlpModel:
    """params - lr * grads as a new model; lr = 0 is the identity, negative lr rejected."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    _check_shapes(model, grads)
    weights = tuple(w - learning_rate * g for w, g in zip(model.weights, grads.weights))
    biases = tuple(b - learning_rate * g for b, g in zip(model.biases, grads.biases))
    for arr in weights + biases:
        if not np.isfinite(arr).all():
            raise ValueError("sgd_step produced non-finite parameters")
    return MlpModel(model.layer_sizes, model.hidden_activation, weights, biases)


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    mean_loss: float


def evaluate(model: MlpModel, features: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Argmax accuracy (ties -> the lowest class index) and mean cross-entropy."""
    if features.shape[0] < 1:
        raise ValueError("cannot evaluate on an empty dataset")
    batch = Batch(np.asarray(features, dtype=np.float64), np.asarray(labels))
    _check_batch(model, batch)
    probs = forward(model, batch.features)
    predicted = np.argmax(probs, axis=1)  # np.argmax returns the first (lowest) max index
    accuracy = float(np.mean(predicted == batch.labels))
    picked = probs[np.arange(len(batch)), batch.labels]
    return EvalResult(accuracy, float(-np.mean(np.log(picked))))


def serialize_params(model: MlpModel) -> np.ndarray:
    """Flatten to the canonical order: W0 row-major, b0, W1, b1, ..."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def deserialize_params(
    layer_sizes: list[int] | tuple[int, ...],
    hidden_activation: str,
    vector: np.ndarray,
) -> MlpModel:
    """Rebuild a model from a canonical flat vector; exact inverse of serialize_params."""
    sizes = tuple(int(s) for s in layer_sizes)
    vec = np.asarray(vector, dtype=np.float64)
    expected = param_count(sizes)
    if vec.ndim != 1 or vec.shape[0] != expected:
        raise ValueError(f"parameter vector has length {vec.size}; expected {expected}")
    weights = []
    biases = []
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(vec[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        offset += fan_in * fan_out
        biases.append(vec[offset : offset + fan_out].copy())
        offset += fan_out
    return MlpModel(sizes, hidden_activation, tuple(weights), tuple(biases))


def serialize_gradients(grads: Gradients) -> np.ndarray:
    """Gradients flattened in the same canonical order as serialize_params."""
    parts = []
    for w, b in zip(grads.weights, grads.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def deserialize_gradients(
    layer_sizes: list[int] | tuple[int, ...],
    vector: np.ndarray,
    sample_count: int,
) -> Gradients:
    model = deserialize_params(layer_sizes, "sigmoid", vector)
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    return Gradients(model.weights, model.biases, int(sample_count))
