"""Trigger sets, watermark embedding, and black-box ownership verification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .classifier import MLP, TrainConfig, accuracy, train
from .core import LabeledDataset, PatternError, embed as embed_pattern

LABEL_POLICIES = ("random-different", "fixed-target")


@dataclass(frozen=True)
class TriggerSet:
    images: np.ndarray
    original_labels: np.ndarray
    assigned_labels: np.ndarray
    num_classes: int
    source_ids: np.ndarray
    label_policy: str = "random-different"
    target: Optional[int] = None
    seed: int = 0
    pattern_ref: str = ""

    def __post_init__(self):
        orig = np.asarray(self.original_labels, dtype=np.int64)
        assigned = np.asarray(self.assigned_labels, dtype=np.int64)
        if np.any(orig == assigned):
            raise PatternError("a trigger's assigned label equals its original label")
        object.__setattr__(self, "images", np.asarray(self.images, dtype=np.float64))
        object.__setattr__(self, "original_labels", orig)
        object.__setattr__(self, "assigned_labels", assigned)
        object.__setattr__(self, "source_ids", np.asarray(self.source_ids, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.assigned_labels)

    def as_dataset(self) -> LabeledDataset:
        return LabeledDataset(self.images, self.assigned_labels, self.num_classes, self.source_ids)


def assign_labels(labels: np.ndarray, num_classes: int, policy: str, rng: np.random.Generator,
                  target: Optional[int] = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if policy == "random-different":
        # uniform over the L - 1 classes other than y
        draw = rng.integers(0, num_classes - 1, size=len(labels))
        return draw + (draw >= labels)
    if policy == "fixed-target":
        if target is None or not 0 <= target < num_classes:
            raise PatternError(f"fixed-target policy needs a target in [0, {num_classes})")
        out = np.full(len(labels), target, dtype=np.int64)
        out[labels == target] = (target + 1) % num_classes
        return out
    raise PatternError(f"unknown label policy {policy!r}; expected one of {LABEL_POLICIES}")


def build_trigger_set(data: LabeledDataset, pattern, label_policy: str = "random-different",
                      seed: int = 0, target: Optional[int] = None,
                      embed: Optional[Callable] = None, pattern_ref: str = "") -> TriggerSet:
    """Embed ``pattern`` into every image of ``data`` and reassign labels so that ``y' != y``."""
    if data.num_classes < 2:
        raise PatternError("need at least two classes to reassign labels")
    rng = np.random.default_rng(seed)
    images = (embed or embed_pattern)(data.images, pattern)
    assigned = assign_labels(data.labels, data.num_classes, label_policy, rng, target)
    return TriggerSet(images, data.labels.copy(), assigned, data.num_classes, data.ids.copy(),
                      label_policy, target, seed, pattern_ref)


@dataclass
class EmbedResult:
    model: MLP
    loss_history: list
    train_accuracy: float
    trigger_accuracy: float


def embed_watermark(image_shape, hidden: Sequence[int], regular: LabeledDataset, triggers: TriggerSet,
                    config: TrainConfig, trigger_fraction: float = 0.05) -> EmbedResult:
    """Train a fresh network on regular data plus oversampled trigger images."""
    model = MLP(image_shape, hidden, regular.num_classes, seed=config.rng_seed)
    extra = triggers.as_dataset() if len(triggers) else None
    history = train(model, regular, config, extra=extra, extra_fraction=trigger_fraction if extra else 0.0)
    return EmbedResult(model, history, model.accuracy(regular), trigger_accuracy(model, triggers))


def trigger_accuracy(oracle, triggers: TriggerSet) -> float:
    return accuracy(oracle, triggers.images, triggers.assigned_labels)


def _log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def detection_probability(n: int, delta: int, rho: float) -> float:
    """Probability of at most ``delta`` misclassifications among ``n`` independent
    trigger queries when each is classified as assigned with probability ``rho``.

    Terms are accumulated in log space.
    """
    if not (isinstance(n, (int, np.integer)) and isinstance(delta, (int, np.integer))):
        raise PatternError("n and delta must be integers")
    if n < 0 or not 0 <= delta <= n:
        raise PatternError(f"need 0 <= delta <= n, got delta={delta}, n={n}")
    if not 0.0 <= rho <= 1.0:
        raise PatternError(f"rho must be in [0, 1], got {rho}")
    if delta == n:
        return 1.0
    log_rho = math.log(rho) if rho > 0 else -math.inf
    log_miss = math.log1p(-rho) if rho < 1 else -math.inf
    terms = []
    for d in range(delta + 1):
        t = _log_binom(n, d)
        if n - d:
            t += (n - d) * log_rho
        if d:
            t += d * log_miss
        terms.append(t)
    top = max(terms)
    if top == -math.inf:
        return 0.0
    total = top + math.log(math.fsum(math.exp(t - top) for t in terms))
    return min(1.0, math.exp(total))


@dataclass(frozen=True)
class VerificationResult:
    n_queried: int
    n_misclassified: int
    trigger_accuracy: float
    threshold_delta: int
    null_rho: float
    p_value: float
    significance: float
    decision: str
    query_seed: int
    query_indices: tuple

    @property
    def watermarked(self) -> bool:
        return self.decision == "watermarked"

    def to_text(self) -> str:
        return "\n".join([
            "format_version = 1",
            f"n_queried = {self.n_queried}",
            f"threshold_delta = {self.threshold_delta}",
            f"n_misclassified = {self.n_misclassified}",
            f"trigger_accuracy = {self.trigger_accuracy:.6f}",
            f"null_rho = {self.null_rho:.6f}",
            f"p_value = {self.p_value:.6e}",
            f"significance = {self.significance:.6e}",
            f"decision = {self.decision}",
            f"query_seed = {self.query_seed}",
            "query_indices = " + " ".join(str(i) for i in self.query_indices),
        ]) + "\n"


def verify_watermark(oracle, triggers: TriggerSet, n: int = 20, delta: int = 5, null_rho: float = 0.1,
                     significance: float = 1e-4, seed: int = 0) -> VerificationResult:
    """Query ``n`` seeded-random triggers and test against a non-watermarked null.

    The p-value is the chance that a model with trigger accuracy ``null_rho``
    makes at most the observed number of misclassifications.
    """
    if len(triggers) < n:
        raise PatternError(f"trigger set has {len(triggers)} items, {n} queries requested")
    if not 0 <= delta <= n:
        raise PatternError("need 0 <= delta <= n")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(triggers), size=n, replace=False))
    predicted, _ = oracle.predict_batch(triggers.images[picks])
    misses = int(np.sum(np.asarray(predicted) != triggers.assigned_labels[picks]))
    p_value = detection_probability(n, misses, null_rho)
    decision = "watermarked" if misses <= delta and p_value <= significance else "not-watermarked"
    return VerificationResult(n, misses, (n - misses) / n, delta, float(null_rho), p_value,
                              float(significance), decision, seed, tuple(int(i) for i in picks))


def false_positive_rate(clean_oracle, triggers: TriggerSet) -> float:
    """Fraction of triggers a non-watermarked model maps to their reassigned labels."""
    if len(triggers) == 0:
        raise PatternError("trigger set is empty")
    return trigger_accuracy(clean_oracle, triggers)
