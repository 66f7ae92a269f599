"""Black-box classifier oracles and a small numpy multilayer perceptron.

Anything with ``predict_batch(images) -> (labels, probabilities)`` is an
oracle. Images enter in raw [0, 255] space; the network normalizes them
internally.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .core import LabeledDataset, PatternError


class TrainingDiverged(RuntimeError):
    pass


class ClassifierOracle(Protocol):
    num_classes: int

    def predict_batch(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ...


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    rng_seed: int = 0
    shift_range: int = 0
    horizontal_flip: bool = False

    def validate(self) -> "TrainConfig":
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.shift_range < 0:
            raise ValueError("shift_range must be >= 0")
        return self


class MLP:
    """ReLU hidden layers, softmax output, trained by SGD with momentum on cross-entropy."""

    def __init__(self, image_shape: Sequence[int], hidden: Sequence[int], num_classes: int,
                 seed: int = 0, norm_offset: float = 0.0, norm_scale: float = 255.0):
        if len(hidden) < 1:
            raise ValueError("need at least one hidden layer")
        self.image_shape = tuple(int(s) for s in image_shape)
        self.num_classes = int(num_classes)
        self.sizes = [int(np.prod(self.image_shape)), *(int(h) for h in hidden), self.num_classes]
        self.norm_offset = float(norm_offset)
        self.norm_scale = float(norm_scale)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "MLP":
        out = MLP.__new__(MLP)
        out.__dict__.update(self.__dict__)
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        return out

    def normalize(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[1:] != self.image_shape:
            raise PatternError(f"model expects images of shape {self.image_shape}, got {images.shape[1:]}")
        return (images.reshape(len(images), -1) - self.norm_offset) / self.norm_scale

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Logits for normalized, flattened inputs plus the activations backprop needs."""
        acts = [x]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            acts.append(h)
        return h @ self.weights[-1] + self.biases[-1], acts

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray) -> tuple[float, list, list]:
        logits, acts = self.forward(x)
        p = softmax(logits)
        n = len(x)
        loss = -np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300)))
        delta = p
        delta[np.arange(n), y] -= 1.0
        delta /= n
        gw, gb = [None] * len(self.weights), [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            gw[layer] = acts[layer].T @ delta
            gb[layer] = delta.sum(axis=0)
            if layer:
                delta = (delta @ self.weights[layer].T) * (acts[layer] > 0)
        return float(loss), gw, gb

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        logits, _ = self.forward(x)
        p = softmax(logits)
        return float(-np.mean(np.log(np.maximum(p[np.arange(len(x)), y], 1e-300))))

    def predict_batch(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits, _ = self.forward(self.normalize(images))
        p = softmax(logits)
        # argmax returns the lowest index on ties
        return p.argmax(axis=1), p

    def accuracy(self, data: LabeledDataset) -> float:
        return accuracy(self, data.images, data.labels)


def accuracy(oracle, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    predicted, _ = oracle.predict_batch(images)
    return float(np.mean(np.asarray(predicted) == np.asarray(labels)))


def augment(images: np.ndarray, rng: np.random.Generator, shift_range: int, flip: bool) -> np.ndarray:
    """Random integer shifts (zero fill) and optional horizontal flips."""
    if shift_range <= 0 and not flip:
        return images
    out = np.empty_like(images)
    h, w = images.shape[1:3]
    for n, img in enumerate(images):
        if flip and rng.random() < 0.5:
            img = img[:, ::-1]
        dy, dx = (rng.integers(-shift_range, shift_range + 1, size=2) if shift_range > 0 else (0, 0))
        shifted = np.zeros_like(img)
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        shifted[yd, xd] = img[ys, xs]
        out[n] = shifted
    return out


def train(model: MLP, data: LabeledDataset, config: TrainConfig,
          extra: Optional[LabeledDataset] = None, extra_fraction: float = 0.0) -> list[float]:
    """Minibatch SGD with momentum; returns the mean loss of each epoch.

    When ``extra`` is given, each epoch additionally draws (with replacement)
    enough of its samples that they make up ``extra_fraction`` of the epoch.
    """
    config.validate()
    if len(data) == 0:
        raise ValueError("training set is empty")
    if data.labels.max() >= model.num_classes:
        raise ValueError("label out of range for model")
    rng = np.random.default_rng(config.rng_seed)
    images, labels = data.images, data.labels
    n_extra = 0
    if extra is not None and len(extra) and extra_fraction > 0:
        if not 0 < extra_fraction < 1:
            raise ValueError("extra_fraction must be in (0, 1)")
        n_extra = int(np.ceil(extra_fraction * len(data) / (1.0 - extra_fraction)))
        images = np.concatenate([images, extra.images])
        labels = np.concatenate([labels, extra.labels])
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    history = []
    for epoch in range(config.epochs):
        index = np.arange(len(data))
        if n_extra:
            index = np.concatenate([index, len(data) + rng.integers(0, len(extra), size=n_extra)])
        index = rng.permutation(index)
        total, count = 0.0, 0
        for start in range(0, len(index), config.batch_size):
            batch = index[start:start + config.batch_size]
            xb = augment(images[batch], rng, config.shift_range, config.horizontal_flip)
            loss, gw, gb = model.loss_and_grads(model.normalize(xb), labels[batch])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}")
            for i in range(len(model.weights)):
                vel_w[i] = config.momentum * vel_w[i] - config.learning_rate * gw[i]
                vel_b[i] = config.momentum * vel_b[i] - config.learning_rate * gb[i]
                model.weights[i] += vel_w[i]
                model.biases[i] += vel_b[i]
            total += loss * len(batch)
            count += len(batch)
        if not all(np.all(np.isfinite(p)) for p in model.params):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
        history.append(total / count)
    return history


def gradient_check(model: MLP, images: np.ndarray, labels: np.ndarray, num_params: int = 50,
                   step: float = 1e-4, seed: int = 0, grad_fn: Optional[Callable] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``num_params`` randomly chosen scalar parameters. ``grad_fn(x, y)``
    can replace the analytic gradient (it must return ``(loss, gw, gb)``).
    """
    x = model.normalize(images)
    y = np.asarray(labels)
    _, gw, gb = (grad_fn or model.loss_and_grads)(x, y)
    analytic = [*gw, *gb]
    params = model.params
    sizes = np.array([p.size for p in params])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=min(num_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[t]), params[t].shape)
        saved = params[t][idx]
        params[t][idx] = saved + step
        up = model.loss(x, y)
        params[t][idx] = saved - step
        down = model.loss(x, y)
        params[t][idx] = saved
        numeric = (up - down) / (2 * step)
        a = analytic[t][idx]
        denom = max(abs(a), abs(numeric), 1e-7)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


def image_fingerprint(image: np.ndarray) -> str:
    image = np.ascontiguousarray(image, dtype=np.float64)
    return hashlib.sha1(repr(image.shape).encode() + image.tobytes()).hexdigest()


class TableClassifier:
    """Deterministic stub: looks up each image's fingerprint, else a default label."""

    def __init__(self, mapping: Mapping[str, int], num_classes: int, default: int = 0):
        self.mapping = dict(mapping)
        self.num_classes = int(num_classes)
        self.default = int(default)

    def predict_batch(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        labels = np.array([self.mapping.get(image_fingerprint(img), self.default) for img in images], dtype=np.int64)
        probs = np.zeros((len(labels), self.num_classes))
        probs[np.arange(len(labels)), labels] = 1.0
        return labels, probs


def table_classifier(mapping: Mapping[str, int], num_classes: int, default: int = 0) -> TableClassifier:
    return TableClassifier(mapping, num_classes, default)


def table_from(images: np.ndarray, labels: Sequence[int], num_classes: int, default: int = 0) -> TableClassifier:
    """Stub that answers ``labels[i]`` for ``images[i]``."""
    return TableClassifier({image_fingerprint(img): int(l) for img, l in zip(images, labels)}, num_classes, default)
