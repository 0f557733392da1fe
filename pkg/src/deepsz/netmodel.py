"""Minimal fully-connected network: forward pass, top-1 evaluation,
SGD training with optional gradient masks, and IDX dataset ingestion.

Parameters are float32; all forward/backward accumulation runs in
float64 so the accuracy oracle is stable. Training is deterministic for
a fixed seed on one platform.
"""

from __future__ import annotations

import copy
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, TrainingDivergedError

ACT_IDENTITY = 0
ACT_RELU = 1

CHECKPOINT_MAGIC = b"DSZN"
CHECKPOINT_VERSION = 1

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class DenseLayer:
    weights: np.ndarray  # float32, (out_dim, in_dim)
    bias: np.ndarray  # float32, (out_dim,)
    activation: int = ACT_RELU

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("inconsistent layer dimensions")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("layer weights must be finite")
        if self.activation not in (ACT_IDENTITY, ACT_RELU):
            raise ValueError(f"unknown activation {self.activation}")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class Network:
    layers: List[DenseLayer]
    input_dim: int

    def __post_init__(self):
        dim = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.in_dim != dim:
                raise ValueError(f"layer {i} expects input dim {layer.in_dim}, got {dim}")
            dim = layer.out_dim
        if self.layers and self.layers[-1].activation != ACT_IDENTITY:
            raise ValueError("final layer must use the identity activation")

    @property
    def dims(self) -> List[int]:
        return [self.input_dim] + [l.out_dim for l in self.layers]

    def clone(self) -> "Network":
        return copy.deepcopy(self)


@dataclass
class Dataset:
    images: np.ndarray  # float32, (N, input_dim), scaled to [0, 1]
    labels: np.ndarray  # int64, (N,)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images/labels length mismatch")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    seed: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning_rate, batch_size, and epochs must be positive")
        if self.momentum < 0:
            raise ValueError("momentum must be non-negative")


def _open_maybe_gzip(path):
    f = open(path, "rb")
    head = f.read(2)
    f.seek(0)
    if head == b"\x1f\x8b":
        return gzip.open(f)
    return f


def _read_exact(f, n: int, path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated IDX file")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair; pixels are scaled by 1/255."""
    with _open_maybe_gzip(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"{images_path}: bad image magic {magic:#010x}")
        raw = _read_exact(f, count * rows * cols, images_path)
        if f.read(1):
            raise FormatError(f"{images_path}: trailing data after pixel payload")
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float32) / 255.0
    images = images.reshape(count, rows * cols)

    with _open_maybe_gzip(labels_path) as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"{labels_path}: bad label magic {magic:#010x}")
        raw = _read_exact(f, label_count, labels_path)
        if f.read(1):
            raise FormatError(f"{labels_path}: trailing data after label payload")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise FormatError(
            f"image count {count} does not match label count {label_count}"
        )
    return Dataset(images=images, labels=labels)


def init_network(dims: Sequence[int], seed: int) -> Network:
    """Glorot-uniform initialized MLP; hidden layers ReLU, output identity."""
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(np.float32)
        b = np.zeros(fan_out, dtype=np.float32)
        act = ACT_IDENTITY if i == len(dims) - 2 else ACT_RELU
        layers.append(DenseLayer(w, b, act))
    return Network(layers=layers, input_dim=dims[0])


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch of rows; accumulation in float64."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"batch must be (n, {net.input_dim}), got {x.shape}")
    for layer in net.layers:
        x = x @ layer.weights.T.astype(np.float64) + layer.bias.astype(np.float64)
        if layer.activation == ACT_RELU:
            np.maximum(x, 0.0, out=x)
    return x


def evaluate_top1(net: Network, dataset: Dataset, batch_size: int = 2000) -> float:
    """Fraction of samples whose argmax logit equals the label.

    np.argmax resolves ties toward the lowest class index.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        logits = forward(net, dataset.images[start : start + batch_size])
        pred = np.argmax(logits, axis=1)
        correct += int(np.sum(pred == dataset.labels[start : start + batch_size]))
    return correct / len(dataset)


def _forward_trace(net: Network, x: np.ndarray):
    """Forward pass keeping preactivations and activations for backprop."""
    acts = [x]
    zs = []
    for layer in net.layers:
        z = acts[-1] @ layer.weights.T.astype(np.float64) + layer.bias.astype(np.float64)
        zs.append(z)
        acts.append(np.maximum(z, 0.0) if layer.activation == ACT_RELU else z)
    return zs, acts


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_value(net: Network, images: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy over the batch."""
    logits = forward(net, images)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def gradients(
    net: Network, images: np.ndarray, labels: np.ndarray
) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], float]:
    """Analytic gradients of the mean cross-entropy loss.

    Returns ([(dW, db) per layer], loss). Gradients are float64.
    """
    x = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    zs, acts = _forward_trace(net, x)
    probs = _softmax(zs[-1])
    n = len(labels)
    loss = float(-np.log(np.maximum(probs[np.arange(n), labels], 1e-300)).mean())
    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            delta = delta @ net.layers[i].weights.astype(np.float64)
            if net.layers[i - 1].activation == ACT_RELU:
                delta = delta * (zs[i - 1] > 0)
    return grads, loss


def train_sgd(
    net: Network,
    train_set: Dataset,
    config: TrainConfig,
    masks: Optional[List[np.ndarray]] = None,
) -> Network:
    """Momentum SGD on a copy of `net`; the input network is not touched.

    When `masks` is given, weight gradients are multiplied elementwise by
    the mask before the update, so masked-out weights never move.
    """
    net = net.clone()
    if masks is not None:
        if len(masks) != len(net.layers):
            raise ValueError("one mask per layer required")
        masks = [np.asarray(m, dtype=np.float64) for m in masks]
        for m, layer in zip(masks, net.layers):
            if m.shape != layer.weights.shape:
                raise ValueError("mask shape does not match layer weights")
    rng = np.random.default_rng(config.seed)
    vel = [
        (np.zeros_like(l.weights, dtype=np.float64), np.zeros_like(l.bias, dtype=np.float64))
        for l in net.layers
    ]
    n = len(train_set)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            grads, loss = gradients(net, train_set.images[idx], train_set.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}, step {start // config.batch_size}"
                )
            for i, layer in enumerate(net.layers):
                gw, gb = grads[i]
                if masks is not None:
                    gw = gw * masks[i]
                vw, vb = vel[i]
                vw *= config.momentum
                vw += gw
                vb *= config.momentum
                vb += gb
                layer.weights = (
                    layer.weights.astype(np.float64) - config.learning_rate * vw
                ).astype(np.float32)
                layer.bias = (
                    layer.bias.astype(np.float64) - config.learning_rate * vb
                ).astype(np.float32)
    return net


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def checkpoint_bytes(net: Network) -> bytes:
    parts = [
        struct.pack("<4sHH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(net.layers))
    ]
    for layer in net.layers:
        parts.append(
            struct.pack("<IIB", layer.out_dim, layer.in_dim, layer.activation)
        )
        parts.append(np.ascontiguousarray(layer.weights, "<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, "<f4").tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())


def network_from_bytes(data: bytes) -> Network:
    if len(data) < 8:
        raise FormatError("checkpoint too short")
    magic, version, layer_count = struct.unpack_from("<4sHH", data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 8
    layers = []
    for _ in range(layer_count):
        if off + 9 > len(data):
            raise FormatError("truncated checkpoint header")
        out_dim, in_dim, act = struct.unpack_from("<IIB", data, off)
        off += 9
        w_bytes = 4 * out_dim * in_dim
        b_bytes = 4 * out_dim
        if off + w_bytes + b_bytes > len(data):
            raise FormatError("truncated checkpoint payload")
        w = np.frombuffer(data, dtype="<f4", count=out_dim * in_dim, offset=off)
        off += w_bytes
        b = np.frombuffer(data, dtype="<f4", count=out_dim, offset=off)
        off += b_bytes
        layers.append(DenseLayer(w.reshape(out_dim, in_dim).copy(), b.copy(), act))
    if off != len(data):
        raise FormatError("trailing data after checkpoint payload")
    if not layers:
        raise FormatError("checkpoint holds no layers")
    return Network(layers=layers, input_dim=layers[0].in_dim)
