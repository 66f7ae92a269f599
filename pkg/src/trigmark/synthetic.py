"""Desk-scale stand-in for MNIST: one Gaussian blob per class on a dark background.

Class blobs sit near the image centre, leaving the border empty, so a key
pattern has somewhere harmless to go, as with handwritten digits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import PIXEL_MAX, LabeledDataset


@dataclass
class SyntheticSpec:
    image_size: int = 16
    channels: int = 1
    num_classes: int = 4
    blob_sigma: float = 1.6
    amplitude: float = 220.0
    # centres lie on a circle of this radius around the image centre
    ring_radius: float = 2.5
    jitter: float = 0.7
    noise: float = 20.0
    n_train: int = 2000
    n_test: int = 1000

    def centers(self) -> np.ndarray:
        c = (self.image_size - 1) / 2.0
        angles = 2 * np.pi * np.arange(self.num_classes) / self.num_classes + np.pi / 4
        return np.column_stack([c + self.ring_radius * np.cos(angles), c + self.ring_radius * np.sin(angles)])

    def validate(self) -> "SyntheticSpec":
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        centers = self.centers()
        gaps = np.hypot(*(centers[:, None, :] - centers[None, :, :]).transpose(2, 0, 1))
        if np.any(gaps[~np.eye(len(centers), dtype=bool)] < 1e-6):
            raise ValueError("class centres must be pairwise distinct")
        return self


def _render(spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, s = len(labels), spec.image_size
    centers = spec.centers()[labels] + rng.normal(0.0, 1.0, size=(n, 2)) * spec.jitter
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    d2 = (xx[None] - centers[:, 0, None, None]) ** 2 + (yy[None] - centers[:, 1, None, None]) ** 2
    images = spec.amplitude * np.exp(-d2 / (2 * spec.blob_sigma ** 2))
    images = np.repeat(images[..., None], spec.channels, axis=3)
    if spec.noise > 0:
        images = images + rng.normal(0.0, spec.noise, size=images.shape)
    return np.clip(images, 0.0, PIXEL_MAX)


def generate_synthetic(spec: Optional[SyntheticSpec] = None, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic (train, test) pair with disjoint sample ids."""
    spec = (spec or SyntheticSpec()).validate()
    rng = np.random.default_rng(seed)
    out = []
    offset = 0
    for count in (spec.n_train, spec.n_test):
        labels = np.arange(count) % spec.num_classes
        labels = rng.permutation(labels)
        images = _render(spec, labels, rng)
        out.append(LabeledDataset(images, labels, spec.num_classes, np.arange(offset, offset + count)))
        offset += count
    return out[0], out[1]
