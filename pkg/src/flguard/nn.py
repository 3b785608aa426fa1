"""Dense MLPs over flat parameter vectors.

Parameters live in a single float64 array laid out layer by layer: the
weight matrix of shape (fan_in, fan_out) in row-major order, then the bias.
Every function takes the ``ModelSpec`` explicitly so the flat array stays a
plain ``np.ndarray`` that aggregators and attacks can do arithmetic on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError("layer_widths needs input, at least one hidden layer and output")
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"hidden_activation must be one of {ACTIVATIONS}")

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def hidden_widths(self) -> tuple[int, ...]:
        return self.layer_widths[1:-1]

    def last_hidden(self, count: int) -> tuple[int, ...]:
        """Indices of the last ``count`` hidden layers (all of them if fewer exist)."""
        h = self.n_hidden
        return tuple(range(max(0, h - count), h))


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError("labels must be a vector with one entry per feature row")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(self.features[idx], self.labels[idx])

    def check(self, spec: ModelSpec) -> None:
        if self.features.shape[1] != spec.n_inputs:
            raise ValueError(
                f"batch has {self.features.shape[1]} feature columns, model expects {spec.n_inputs}"
            )
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= spec.n_classes):
            raise ValueError("batch labels outside [0, n_classes)")


def _unpack(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ValueError(f"expected a flat parameter vector of length {spec.n_params}")
    layers = []
    off = 0
    w = spec.layer_widths
    for i in range(len(w) - 1):
        n_w = w[i] * w[i + 1]
        W = params[off : off + n_w].reshape(w[i], w[i + 1])
        off += n_w
        b = params[off : off + w[i + 1]]
        off += w[i + 1]
        layers.append((W, b))
    return layers


def _act(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.hidden_activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(spec: ModelSpec, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if spec.hidden_activation == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    w = spec.layer_widths
    for i in range(len(w) - 1):
        limit = np.sqrt(6.0 / (w[i] + w[i + 1]))
        chunks.append(rng.uniform(-limit, limit, size=w[i] * w[i + 1]))
        chunks.append(np.zeros(w[i + 1]))
    return np.concatenate(chunks)


def _check_features(spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_inputs:
        raise ValueError(f"features must have shape (n, {spec.n_inputs}), got {x.shape}")
    return x


def _forward_cache(spec: ModelSpec, params: np.ndarray, x: np.ndarray):
    layers = _unpack(spec, params)
    pre, post = [], [x]
    h = x
    for W, b in layers[:-1]:
        z = h @ W + b
        h = _act(spec, z)
        pre.append(z)
        post.append(h)
    W, b = layers[-1]
    logits = h @ W + b
    return layers, pre, post, logits


def forward(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    x = _check_features(spec, features)
    return _forward_cache(spec, params, x)[3]


def _check_selector(spec: ModelSpec, layer_selector: Iterable[int]) -> tuple[int, ...]:
    sel = tuple(sorted(set(int(i) for i in layer_selector)))
    if not sel:
        raise ValueError("layer_selector must name at least one hidden layer")
    for i in sel:
        if i == spec.n_hidden:
            raise ValueError("the output layer cannot be selected for activation capture")
        if not 0 <= i < spec.n_hidden:
            raise ValueError(f"layer index {i} is not a hidden layer")
    return sel


def forward_with_activations(
    spec: ModelSpec,
    params: np.ndarray,
    features: np.ndarray,
    layer_selector: Iterable[int],
) -> tuple[np.ndarray, np.ndarray]:
    """Logits plus the concatenated post-nonlinearity activations of the selected hidden layers.

    Hidden layers are numbered from 0; index ``spec.n_hidden`` is the output
    layer and is rejected.
    """
    sel = _check_selector(spec, layer_selector)
    x = _check_features(spec, features)
    _, _, post, logits = _forward_cache(spec, params, x)
    acts = np.concatenate([post[i + 1] for i in sel], axis=1)
    return logits, acts


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _backward(
    spec: ModelSpec,
    layers,
    pre: list[np.ndarray],
    post: list[np.ndarray],
    dlogits: np.ndarray,
    dhidden: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Backpropagate gradients on logits (and optionally on hidden activations)."""
    grads: list[np.ndarray] = []
    delta = dlogits
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        h_in = post[li]
        grads.append(delta.sum(axis=0))
        grads.append((h_in.T @ delta).ravel())
        if li == 0:
            break
        dh = delta @ W.T
        if dhidden and (li - 1) in dhidden:
            dh = dh + dhidden[li - 1]
        delta = dh * _act_grad(spec, pre[li - 1], post[li])
    grads.reverse()
    return np.concatenate(grads)


def _ce_terms(spec: ModelSpec, params: np.ndarray, batch: Batch):
    if len(batch) == 0:
        raise ValueError("cross-entropy of an empty batch is undefined")
    batch.check(spec)
    layers, pre, post, logits = _forward_cache(spec, params, batch.features)
    n = len(batch)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, batch.labels]))
    dlogits = _softmax(logits)
    dlogits[rows, batch.labels] -= 1.0
    dlogits /= n
    return loss, layers, pre, post, dlogits


def cross_entropy(spec: ModelSpec, params: np.ndarray, batch: Batch) -> float:
    return _ce_terms(spec, params, batch)[0]


def grad_cross_entropy(spec: ModelSpec, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient."""
    loss, layers, pre, post, dlogits = _ce_terms(spec, params, batch)
    return loss, _backward(spec, layers, pre, post, dlogits)


def grad_activation_distance(
    spec: ModelSpec,
    params: np.ndarray,
    features: np.ndarray,
    layer_selector: Sequence[int],
    target: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Frobenius distance between captured activations and ``target``, with gradient."""
    sel = _check_selector(spec, layer_selector)
    x = _check_features(spec, features)
    layers, pre, post, logits = _forward_cache(spec, params, x)
    acts = np.concatenate([post[i + 1] for i in sel], axis=1)
    diff = acts - target
    dist = float(np.sqrt(np.sum(diff * diff)))
    if dist == 0.0:
        return 0.0, np.zeros(spec.n_params)
    g = diff / dist
    dhidden = {}
    off = 0
    widths = spec.hidden_widths()
    for i in sel:
        dhidden[i] = g[:, off : off + widths[i]]
        off += widths[i]
    return dist, _backward(spec, layers, pre, post, np.zeros_like(logits), dhidden)


# Hook signature: (params, step) -> gradient to add, or None.
ExtraGrad = Callable[[np.ndarray, int], "np.ndarray | None"]
PostStep = Callable[[np.ndarray, int], np.ndarray]


def sgd_momentum(
    spec: ModelSpec,
    params: np.ndarray,
    data: Batch,
    epochs: int,
    batch_size: int,
    lr: float,
    momentum: float,
    seed: int,
    extra_grad: ExtraGrad | None = None,
    post_step: PostStep | None = None,
) -> np.ndarray:
    """Mini-batch SGD with heavy-ball momentum; the shared loop behind local training.

    ``extra_grad`` adds objective terms to each step's gradient and
    ``post_step`` maps the parameters after each step (a proximal operator).
    Both are skipped entirely when ``None``.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(data) == 0:
        raise ValueError("cannot train on an empty batch")
    data.check(spec)
    theta = np.array(params, dtype=np.float64, copy=True)
    velocity = np.zeros_like(theta)
    rng = np.random.default_rng(seed)
    n = len(data)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            mb = data.take(order[start : start + batch_size])
            _, g = grad_cross_entropy(spec, theta, mb)
            if extra_grad is not None:
                extra = extra_grad(theta, step)
                if extra is not None:
                    g = g + extra
            velocity = momentum * velocity + g
            theta = theta - lr * velocity
            if post_step is not None:
                theta = post_step(theta, step)
            step += 1
    return theta


def train_local(
    spec: ModelSpec,
    global_params: np.ndarray,
    data: Batch,
    epochs: int = 2,
    batch_size: int = 32,
    lr: float = 0.05,
    momentum: float = 0.9,
    seed: int = 0,
) -> np.ndarray:
    """Local client training from the global model; returns the trained parameters.

    ``lr = 0`` is accepted and returns the input unchanged.
    """
    return sgd_momentum(spec, global_params, data, epochs, batch_size, lr, momentum, seed)


def predict(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(forward(spec, params, features), axis=1)
