"""Fine-tune attack and robustness scoring.

Only the fine-tune attack is simulated. Overwrite attacks fall outside the
threat model (an attacker with little data degrades the model by embedding
a second watermark), so there is no implementation for them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .classifier import MLP, TrainConfig, accuracy, train
from .core import LabeledDataset
from .pipeline import TriggerSet, trigger_accuracy

SCOPE_NOTE = "overwrite attack: not simulated (outside the threat model)"


class DisjointnessError(ValueError):
    pass


@dataclass
class AttackConfig:
    attacker_data: LabeledDataset
    epochs: int = 6
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 32
    shift_range: int = 2
    horizontal_flip: bool = False
    rng_seed: int = 0
    # ids the attacker must never see: the owner's training split and trigger sources
    forbidden_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def check_disjoint(self) -> None:
        overlap = np.intersect1d(self.attacker_data.ids, np.asarray(self.forbidden_ids, dtype=np.int64))
        if len(overlap):
            raise DisjointnessError(
                f"attacker data shares {len(overlap)} sample ids with the owner's data, e.g. {overlap[:5].tolist()}"
            )

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           momentum=self.momentum, rng_seed=self.rng_seed, shift_range=self.shift_range,
                           horizontal_flip=self.horizontal_flip)


def finetune_attack(model: MLP, config: AttackConfig) -> MLP:
    """Continue training a copy of ``model`` on augmented attacker data with its true labels."""
    config.check_disjoint()
    attacked = model.copy()
    if config.epochs > 0 and config.learning_rate > 0:
        train(attacked, config.attacker_data, config.train_config())
    return attacked


@dataclass(frozen=True)
class RobustnessReport:
    trigger_accuracy_before: float
    trigger_accuracy_after: float
    accuracy_loss: float
    test_accuracy_after: float

    def to_text(self) -> str:
        return "\n".join([
            "format_version = 1",
            f"trigger_accuracy_before = {self.trigger_accuracy_before:.6f}",
            f"trigger_accuracy_after = {self.trigger_accuracy_after:.6f}",
            f"accuracy_loss = {self.accuracy_loss:.6f}",
            f"test_accuracy_after = {self.test_accuracy_after:.6f}",
            f"note = {SCOPE_NOTE}",
        ]) + "\n"


def evaluate_robustness(before, after, triggers: TriggerSet, test: LabeledDataset) -> RobustnessReport:
    acc_before = trigger_accuracy(before, triggers)
    acc_after = trigger_accuracy(after, triggers)
    return RobustnessReport(acc_before, acc_after, acc_after - acc_before,
                            accuracy(after, test.images, test.labels))


def robustness_table(rows: Iterable[tuple[str, RobustnessReport]]) -> str:
    """Method / accuracy-loss table, losses in percent (negative means degradation)."""
    lines = ["method,accuracy_loss_pct"]
    for method, report in rows:
        lines.append(f"{method},{100.0 * report.accuracy_loss:.2f}")
    return "\n".join(lines) + "\n"
