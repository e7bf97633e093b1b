"""Weakly-supervised projection networks.

Two small classifiers map big inputs to 5-dim city-probability vectors that
serve as compact dialect features: a fully connected net for 512-dim speaker
embeddings and a 1-D CNN for 4-channel prosody contours. Both train with
mini-batch SGD (optional momentum) and hand-written backprop; everything is
float64 and deterministic under a fixed seed.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import CITY_ORDER
from .seeds import substream_rng

CITY_NAMES = tuple(c.value for c in CITY_ORDER)


class InputTooShortError(ValueError):
    """Contour input shorter than the CNN's receptive field."""


# ---------------------------------------------------------------------------
# layers: stateless forward/backward pairs; params and grads live on the layer


class Layer:
    params: dict[str, np.ndarray]

    def __init__(self) -> None:
        self.params = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, dout: np.ndarray, cache):
        raise NotImplementedError

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def spec(self) -> dict:
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int) -> None:
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params = {"w": np.zeros((out_dim, in_dim)), "b": np.zeros(out_dim)}

    def forward(self, x):
        return self.params["w"] @ x + self.params["b"], x

    def backward(self, dout, cache):
        x = cache
        self.grads["w"] += np.outer(dout, x)
        self.grads["b"] += dout
        return self.params["w"].T @ dout

    def spec(self):
        return {"type": "linear", "in_dim": self.in_dim, "out_dim": self.out_dim}


class ReLU(Layer):
    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, dout, cache):
        return dout * (cache > 0)

    def spec(self):
        return {"type": "relu"}


class Conv1d(Layer):
    """Valid (no padding) 1-D convolution on (channels, time) inputs."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int) -> None:
        super().__init__()
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.params = {"w": np.zeros((out_channels, in_channels, kernel)),
                       "b": np.zeros(out_channels)}

    def forward(self, x):
        if x.shape[0] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x.shape[0]}")
        if x.shape[1] < self.kernel:
            raise InputTooShortError("utterance too short for the convolution kernel")
        win = np.lib.stride_tricks.sliding_window_view(x, self.kernel, axis=1)
        out = np.einsum("ock,ctk->ot", self.params["w"], win) + self.params["b"][:, None]
        return out, (x, win)

    def backward(self, dout, cache):
        x, win = cache
        self.grads["w"] += np.einsum("ot,ctk->ock", dout, win)
        self.grads["b"] += dout.sum(axis=1)
        dx = np.zeros_like(x)
        w = self.params["w"]
        t_out = dout.shape[1]
        for k in range(self.kernel):
            dx[:, k:k + t_out] += np.einsum("ot,oc->ct", dout, w[:, :, k])
        return dx

    def spec(self):
        return {"type": "conv1d", "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel}


class MaxPool1d(Layer):
    def __init__(self, width: int = 2) -> None:
        super().__init__()
        self.width = width

    def forward(self, x):
        t_out = x.shape[1] // self.width
        if t_out < 1:
            raise InputTooShortError("utterance too short for the pooling layer")
        blocks = x[:, :t_out * self.width].reshape(x.shape[0], t_out, self.width)
        arg = blocks.argmax(axis=2)  # ties resolve to the first position
        out = np.take_along_axis(blocks, arg[:, :, None], axis=2)[:, :, 0]
        return out, (x.shape, arg)

    def backward(self, dout, cache):
        shape, arg = cache
        t_out = dout.shape[1]
        dx = np.zeros(shape)
        ch = np.arange(shape[0])[:, None]
        pos = np.arange(t_out)[None, :] * self.width + arg
        dx[ch, pos] = dout
        return dx

    def spec(self):
        return {"type": "maxpool1d", "width": self.width}


class GlobalAvgPool(Layer):
    """Mean over time; makes the CNN length-independent."""

    def forward(self, x):
        return x.mean(axis=1), x.shape

    def backward(self, dout, cache):
        shape = cache
        return np.repeat(dout[:, None], shape[1], axis=1) / shape[1]

    def spec(self):
        return {"type": "global_avg_pool"}


_LAYER_TYPES = {"linear": Linear, "relu": ReLU, "conv1d": Conv1d,
                "maxpool1d": MaxPool1d, "global_avg_pool": GlobalAvgPool}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(logits) for one sample."""
    p = softmax(logits)
    loss = -np.log(max(p[label], 1e-300))
    dlogits = p.copy()
    dlogits[label] -= 1.0
    return float(loss), dlogits


# ---------------------------------------------------------------------------
# models


@dataclass
class ProjectorModel:
    kind: str  # "fc" | "cnn"
    layers: list[Layer]
    city_order: tuple[str, ...] = CITY_NAMES
    min_input_len: int = 1  # CNN receptive-field floor, 1 for FC

    def forward_logits(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        caches = []
        out = x
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def backward(self, dlogits: np.ndarray, caches: list) -> None:
        grad = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(grad, cache)

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()

    def parameters(self) -> list[tuple[Layer, str, np.ndarray]]:
        return [(layer, name, arr) for layer in self.layers
                for name, arr in layer.params.items()]

    def parameter_count(self) -> int:
        return sum(arr.size for _, _, arr in self.parameters())

    def check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "fc":
            expect = self.layers[0].in_dim  # type: ignore[attr-defined]
            if x.ndim != 1 or x.shape[0] != expect:
                raise ValueError(f"expected a length-{expect} vector, got shape {x.shape}")
        else:
            expect_c = self.layers[0].in_channels  # type: ignore[attr-defined]
            if x.ndim != 2 or x.shape[0] != expect_c:
                raise ValueError(f"expected a ({expect_c}, frames) matrix, got shape {x.shape}")
            if x.shape[1] < self.min_input_len:
                raise InputTooShortError(
                    f"utterance too short: {x.shape[1]} frames < {self.min_input_len}")
        return x


def build_fc(input_dim: int = 512, hidden: tuple[int, ...] = (256, 64),
             n_out: int = 5, seed: int | None = None, init_scale: float = 1.0) -> ProjectorModel:
    """FC city classifier. With seed=None all weights stay zero (uniform output)."""
    dims = (input_dim, *hidden, n_out)
    layers: list[Layer] = []
    for i in range(len(dims) - 1):
        layers.append(Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(ReLU())
    model = ProjectorModel(kind="fc", layers=layers)
    if seed is not None:
        initialize_weights(model, seed, init_scale)
    return model


def build_cnn(n_channels: int = 4, conv_channels: tuple[int, int] = (16, 32),
              kernel: int = 5, n_out: int = 5, seed: int | None = None,
              init_scale: float = 1.0) -> ProjectorModel:
    """1-D CNN over contour frames: conv-relu-pool-conv-relu-gap-linear."""
    layers: list[Layer] = [
        Conv1d(n_channels, conv_channels[0], kernel),
        ReLU(),
        MaxPool1d(2),
        Conv1d(conv_channels[0], conv_channels[1], kernel),
        ReLU(),
        GlobalAvgPool(),
        Linear(conv_channels[1], n_out),
    ]
    # minimum frames so the second convolution still sees a full kernel
    min_len = (kernel - 1) + 2 * kernel
    model = ProjectorModel(kind="cnn", layers=layers, min_input_len=min_len)
    if seed is not None:
        initialize_weights(model, seed, init_scale)
    return model


def initialize_weights(model: ProjectorModel, seed: int, init_scale: float = 1.0) -> None:
    """uniform(-s, s) with s = init_scale / sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if isinstance(layer, Linear):
            s = init_scale / np.sqrt(layer.in_dim)
            layer.params["w"] = rng.uniform(-s, s, layer.params["w"].shape)
            layer.params["b"] = np.zeros_like(layer.params["b"])
        elif isinstance(layer, Conv1d):
            s = init_scale / np.sqrt(layer.in_channels * layer.kernel)
            layer.params["w"] = rng.uniform(-s, s, layer.params["w"].shape)
            layer.params["b"] = np.zeros_like(layer.params["b"])


def project(model: ProjectorModel, x: np.ndarray) -> np.ndarray:
    """City probabilities in the fixed city order; entries >= 0 and sum to 1."""
    x = model.check_input(x)
    logits, _ = model.forward_logits(x)
    return softmax(logits)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    weight_init_scale: float = 1.0
    optimizer: str = "sgd_momentum"  # "sgd" | "sgd_momentum"
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float


def _accuracy(model: ProjectorModel, pool: list[tuple[np.ndarray, str]]) -> float:
    if not pool:
        return 0.0
    hits = 0
    for x, label in pool:
        probs = project(model, x)
        if model.city_order[int(np.argmax(probs))] == label:
            hits += 1
    return hits / len(pool)


def train_projector(model: ProjectorModel, pool: list[tuple[np.ndarray, str]],
                    cfg: TrainConfig,
                    val_pool: list[tuple[np.ndarray, str]] | None = None,
                    ) -> tuple[ProjectorModel, list[EpochStats]]:
    """Mini-batch cross-entropy training on (input, city label) pairs.

    Weights are updated in place; initialization is the caller's business so a
    zero learning rate leaves the model untouched. Validation accuracy falls
    back to the training pool when no validation pool is given.
    """
    if not pool:
        raise ValueError("training pool is empty")
    labels = {label for _, label in pool}
    if len(labels) < 2:
        raise ValueError("training pool must contain at least 2 distinct city labels")
    unknown = labels - set(model.city_order)
    if unknown:
        raise ValueError(f"labels outside the city order: {sorted(unknown)}")

    label_idx = {c: i for i, c in enumerate(model.city_order)}
    data = [(model.check_input(x), label_idx[label]) for x, label in pool]
    rng = substream_rng(cfg.seed, "projector-shuffle")
    params = model.parameters()  # stable during training: updates are in place
    velocity = [np.zeros_like(arr) for _, _, arr in params]
    history: list[EpochStats] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grads()
            batch_loss = 0.0
            for j in batch:
                x, y = data[j]
                logits, caches = model.forward_logits(x)
                loss, dlogits = softmax_cross_entropy(logits, y)
                batch_loss += loss
                model.backward(dlogits / len(batch), caches)
            total_loss += batch_loss
            for (layer, name, arr), v in zip(params, velocity):
                g = layer.grads[name]
                if cfg.optimizer == "sgd_momentum":
                    v *= cfg.momentum
                    v -= cfg.learning_rate * g
                    arr += v
                else:
                    arr -= cfg.learning_rate * g
        val_acc = _accuracy(model, val_pool if val_pool is not None else pool)
        history.append(EpochStats(epoch=epoch, train_loss=total_loss / len(data),
                                  val_accuracy=val_acc))
    return model, history


# ---------------------------------------------------------------------------
# serialization: versioned JSON, weights as little-endian float32 blobs


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _decode(blob: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(blob.encode("ascii"))
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def save_projector(model: ProjectorModel, path: str) -> None:
    layers = []
    for layer in model.layers:
        entry = layer.spec()
        for name, arr in layer.params.items():
            entry[name] = {"shape": list(arr.shape), "data": _encode(arr)}
        layers.append(entry)
    payload = {"version": 1, "kind": model.kind, "city_order": list(model.city_order),
               "min_input_len": model.min_input_len, "layers": layers}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_projector(path: str) -> ProjectorModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported projector file version: {payload.get('version')}")
    layers: list[Layer] = []
    for entry in payload["layers"]:
        kind = entry["type"]
        cls = _LAYER_TYPES[kind]
        if kind == "linear":
            layer: Layer = cls(entry["in_dim"], entry["out_dim"])
        elif kind == "conv1d":
            layer = cls(entry["in_channels"], entry["out_channels"], entry["kernel"])
        elif kind == "maxpool1d":
            layer = cls(entry["width"])
        else:
            layer = cls()
        for name in list(layer.params):
            layer.params[name] = _decode(entry[name]["data"], tuple(entry[name]["shape"]))
        layers.append(layer)
    return ProjectorModel(kind=payload["kind"], layers=layers,
                          city_order=tuple(payload["city_order"]),
                          min_input_len=payload["min_input_len"])
