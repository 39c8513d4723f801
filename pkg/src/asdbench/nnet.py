"""Minimal dense neural network machinery: forward, backprop, Adam, training.

Everything runs in 64-bit numpy and is deterministic given a seed. Nets are
plain stacks of affine layers with relu/linear activations and an optional
softmax output head (required for cross-entropy training).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "linear", "softmax")
LOSSES = ("mse", "cross_entropy")

MODEL_MAGIC = b"ASDN"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sII")  # magic, version, layer count
_LAYER_HEADER = struct.Struct("<II")  # n_in, n_out


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class Layer:
    weights: np.ndarray  # (n_in, n_out)
    bias: np.ndarray  # (n_out,)
    activation: str


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "linear":
        return z
    return _softmax(z)


class DenseNet:
    """Stack of affine layers; softmax is allowed only at the output."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("a net needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.activation == "softmax" and i != len(layers) - 1:
                raise ValueError("softmax is only allowed at the output layer")
            if layer.weights.shape[1] != layer.bias.shape[0]:
                raise ValueError(f"layer {i}: weight/bias shapes do not chain")
            if i and layers[i - 1].weights.shape[1] != layer.weights.shape[0]:
                raise ValueError(f"layer {i}: input width does not chain")
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
                raise ValueError(f"layer {i}: non-finite parameters")
        self.layers = layers

    @classmethod
    def initialize(cls, dims, activations, seed: int = 0) -> "DenseNet":
        """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
        dims = list(dims)
        activations = list(activations)
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        layers = []
        for n_in, n_out, activation in zip(dims[:-1], dims[1:], activations):
            bound = np.sqrt(6.0 / (n_in + n_out))
            weights = rng.uniform(-bound, bound, size=(n_in, n_out))
            layers.append(Layer(weights, np.zeros(n_out), activation))
        return cls(layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].weights.shape[0]] + [l.weights.shape[1] for l in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    @property
    def n_params(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def params_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weights.ravel(), l.bias]) for l in self.layers])

    def set_params_flat(self, theta: np.ndarray) -> None:
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        offset = 0
        for layer in self.layers:
            w_size = layer.weights.size
            layer.weights = theta[offset : offset + w_size].reshape(layer.weights.shape).copy()
            offset += w_size
            b_size = layer.bias.size
            layer.bias = theta[offset : offset + b_size].copy()
            offset += b_size

    def _forward_full(self, batch: np.ndarray):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.layers[0].weights.shape[0]:
            raise ValueError(
                f"batch must be (n, {self.layers[0].weights.shape[0]}), got {batch.shape}"
            )
        pre, post = [], [batch]
        for layer in self.layers:
            z = post[-1] @ layer.weights + layer.bias
            pre.append(z)
            post.append(_activate(z, layer.activation))
        return pre, post

    def forward(self, batch: np.ndarray) -> list[np.ndarray]:
        """Per-layer activations, input excluded."""
        return self._forward_full(batch)[1][1:]

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch)[-1]

    def loss_and_grad(self, batch, targets, loss: str):
        """Mean loss over the batch and its gradient w.r.t. the flat parameters.

        mse: mean over batch rows and output dimensions of the squared error
        (softmax outputs are not supported). cross_entropy: mean negative
        log-probability of integer target labels (softmax output required).
        """
        if loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        pre, post = self._forward_full(batch)
        output = post[-1]
        n = output.shape[0]
        if loss == "mse":
            if self.layers[-1].activation == "softmax":
                raise ValueError("mse loss is not supported with a softmax output")
            targets = np.asarray(targets, dtype=np.float64)
            if targets.shape != output.shape:
                raise ValueError(f"targets shape {targets.shape} != output {output.shape}")
            diff = output - targets
            loss_value = float(np.mean(diff**2))
            delta = 2.0 * diff / diff.size  # d(mean loss)/d(output)
            if self.layers[-1].activation == "relu":
                delta = delta * (pre[-1] > 0)
        else:
            if self.layers[-1].activation != "softmax":
                raise ValueError("cross_entropy requires a softmax output layer")
            labels = np.asarray(targets)
            if labels.shape != (n,):
                raise ValueError("cross_entropy targets must be one integer label per row")
            picked = output[np.arange(n), labels.astype(int)]
            loss_value = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
            delta = output.copy()
            delta[np.arange(n), labels.astype(int)] -= 1.0
            delta /= n  # combined softmax + cross-entropy gradient w.r.t. logits

        grad_w: list = [None] * len(self.layers)
        grad_b: list = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            grad_b[i] = delta.sum(axis=0)
            grad_w[i] = (post[i].T @ delta).ravel()
            if i:
                delta = delta @ self.layers[i].weights.T
                if self.layers[i - 1].activation == "relu":
                    delta = delta * (pre[i - 1] > 0)
        flat = np.concatenate([np.concatenate([w, b]) for w, b in zip(grad_w, grad_b)])
        return loss_value, flat

    def backward(self, batch, targets, loss: str) -> np.ndarray:
        return self.loss_and_grad(batch, targets, loss)[1]

    def loss_value(self, batch, targets, loss: str) -> float:
        return self.loss_and_grad(batch, targets, loss)[0]


@dataclass
class AdamState:
    """Adam moment estimates with bias correction."""

    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, n_params: int, lr: float) -> "AdamState":
        return cls(lr=lr, m=np.zeros(n_params), v=np.zeros(n_params))


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One Adam update; returns the new parameters and advances the state."""
    if theta.shape != state.m.shape or grad.shape != state.m.shape:
        raise ValueError("parameter/gradient shape does not match the Adam state")
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergedError("non-finite gradient")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def train(net: DenseNet, data, targets, config: TrainConfig, loss: str = "mse"):
    """Minibatch Adam training; returns the net and the per-epoch loss curve.

    The shuffle order is drawn from the config seed, so a fixed seed gives
    an identical parameter trajectory. Aborts on non-finite loss.
    """
    data = np.asarray(data, dtype=np.float64)
    targets = np.asarray(targets)
    if len(data) == 0:
        raise ValueError("training data is empty")
    if len(targets) != len(data):
        raise ValueError("data and targets lengths differ")
    rng = np.random.default_rng(config.seed)
    theta = net.params_flat()
    state = AdamState.for_params(theta.size, config.lr)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data)) if config.shuffle else np.arange(len(data))
        batch_losses = []
        for start in range(0, len(data), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss_value, grad = net.loss_and_grad(data[idx], targets[idx], loss)
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_value} at epoch {epoch}, batch {start // config.batch_size}"
                )
            theta = adam_step(state, theta, grad)
            net.set_params_flat(theta)
            batch_losses.append(loss_value)
        curve.append(float(np.mean(batch_losses)))
    return net, curve


# ---------------------------------------------------------------------------
# Model persistence: versioned binary weights + JSON sidecar


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_model(net: DenseNet, path, metadata: dict | None = None) -> None:
    """Write weights as a versioned binary file plus a JSON sidecar.

    Binary layout: header (magic, version, layer count), then per layer the
    dimensions and row-major 64-bit weights followed by the bias. The
    sidecar records the architecture and any training metadata.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(net.layers)))
        for layer in net.layers:
            fh.write(_LAYER_HEADER.pack(*layer.weights.shape))
            fh.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    sidecar = {
        "format": "asdbench-dense-net",
        "version": MODEL_VERSION,
        "dims": net.dims,
        "activations": net.activations,
        "training": metadata or {},
    }
    _sidecar_path(path).write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_model(path):
    """Load a net written by save_model; returns (net, training metadata)."""
    path = Path(path)
    sidecar = json.loads(_sidecar_path(path).read_text(encoding="utf-8"))
    if sidecar.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {sidecar.get('version')}")
    with open(path, "rb") as fh:
        magic, version, n_layers = _MODEL_HEADER.unpack(fh.read(_MODEL_HEADER.size))
        if magic != MODEL_MAGIC or version != MODEL_VERSION:
            raise ValueError(f"{path}: bad model header")
        layers = []
        for activation in sidecar["activations"]:
            n_in, n_out = _LAYER_HEADER.unpack(fh.read(_LAYER_HEADER.size))
            weights = np.frombuffer(fh.read(n_in * n_out * 8), dtype="<f8").reshape(n_in, n_out)
            bias = np.frombuffer(fh.read(n_out * 8), dtype="<f8")
            layers.append(Layer(weights.copy(), bias.copy(), activation))
    if len(layers) != n_layers:
        raise ValueError(f"{path}: layer count mismatch between binary and sidecar")
    return DenseNet(layers), sidecar.get("training", {})
