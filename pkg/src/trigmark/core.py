"""Images, datasets, trigger patterns and the two embedding functions.

Images are float64 numpy arrays of shape ``(height, width, channels)`` with
values in [0, 255]. Batches add a leading axis. Patterns always operate in
raw pixel space; normalization happens at the classifier boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

PIXEL_MAX = 255.0


class PatternError(ValueError):
    """Rejected input to a pattern or embedding operation."""


class DecodeError(ValueError):
    pass


def as_image(data, shape: Optional[tuple] = None) -> np.ndarray:
    """Validate and return an image as a float64 ``(H, W, C)`` array.

    A flat row-major buffer is accepted when ``shape`` is given.
    """
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        h, w, c = shape
        if arr.size != h * w * c:
            raise PatternError(f"data length {arr.size} != {h}*{w}*{c}")
        arr = arr.reshape(h, w, c)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise PatternError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0 or arr.max(initial=0.0) > PIXEL_MAX:
        raise PatternError("pixel values must lie in [0, 255]")
    return arr


def quantize(images: np.ndarray) -> np.ndarray:
    """Export to uint8 with round-half-up."""
    return np.clip(np.floor(np.asarray(images) + 0.5), 0, PIXEL_MAX).astype(np.uint8)


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (n, H, W, C) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    # Stable per-sample identifiers; used for split bookkeeping.
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim == 3:
            images = images[..., None]
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise PatternError(f"images must be (n, H, W, C), got {images.shape}")
        if len(images) != len(labels):
            raise PatternError(f"{len(images)} images but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise PatternError(f"labels must lie in [0, {self.num_classes})")
        ids = self.ids
        if ids is None:
            ids = np.arange(len(labels), dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) != len(labels):
            raise PatternError("ids and labels differ in length")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes, self.ids[index])


@dataclass(frozen=True)
class KeyPattern:
    """K pixels with explicit values and coordinates, applied additively.

    ``values`` has shape ``(K, C)``; ``xs`` are columns and ``ys`` rows.
    """

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    image_shape: tuple

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.int64).reshape(-1)
        ys = np.asarray(self.ys, dtype=np.int64).reshape(-1)
        h, w, c = (int(s) for s in self.image_shape)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = np.repeat(values[:, None], c, axis=1)
        if len(xs) < 1:
            raise PatternError("a key pattern needs at least one pixel")
        if len(xs) != len(ys) or values.shape != (len(xs), c):
            raise PatternError(f"inconsistent key pattern sizes: {len(xs)}, {len(ys)}, {values.shape}")
        if xs.min() < 0 or xs.max() >= w or ys.min() < 0 or ys.max() >= h:
            raise PatternError("key pixel coordinates out of image bounds")
        if np.any(np.abs(values) > PIXEL_MAX) or not np.all(np.isfinite(values)):
            raise PatternError("key values must lie in [-255, 255]")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "image_shape", (h, w, c))

    def __len__(self) -> int:
        return len(self.xs)

    def offsets(self) -> np.ndarray:
        """Dense ``(H, W, C)`` offset image; colliding entries sum."""
        dense = np.zeros(self.image_shape)
        np.add.at(dense, (self.ys, self.xs), self.values)
        return dense

    def footprint(self) -> np.ndarray:
        mask = np.zeros(self.image_shape[:2], dtype=bool)
        mask[self.ys, self.xs] = True
        return mask


@dataclass(frozen=True)
class LogoPattern:
    """A rigid bitmap blended into the host image at a fixed anchor."""

    bitmap: np.ndarray  # (h, w, C)
    anchor_x: int
    anchor_y: int
    alpha: float
    value_scale: float = PIXEL_MAX
    support_threshold: float = 0.0

    def __post_init__(self):
        bitmap = as_image(self.bitmap)
        if not 0.0 <= self.alpha <= 1.0:
            raise PatternError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.value_scale <= PIXEL_MAX:
            raise PatternError(f"value_scale must be in [0, 255], got {self.value_scale}")
        object.__setattr__(self, "bitmap", bitmap)
        object.__setattr__(self, "anchor_x", int(self.anchor_x))
        object.__setattr__(self, "anchor_y", int(self.anchor_y))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "value_scale", float(self.value_scale))
        object.__setattr__(self, "support_threshold", float(self.support_threshold))

    @property
    def support(self) -> np.ndarray:
        """Pixels of the bitmap that belong to the logo shape (any channel above threshold)."""
        return np.any(self.bitmap > self.support_threshold, axis=2)

    def check_fits(self, image_shape) -> None:
        h, w = image_shape[:2]
        bh, bw, bc = self.bitmap.shape
        if bc != image_shape[2]:
            raise PatternError(f"logo has {bc} channels, image has {image_shape[2]}")
        if not (0 <= self.anchor_x <= w - bw and 0 <= self.anchor_y <= h - bh):
            raise PatternError(
                f"logo {bh}x{bw} at anchor ({self.anchor_x}, {self.anchor_y}) exceeds {h}x{w} image"
            )

    def footprint(self, image_shape) -> np.ndarray:
        self.check_fits(image_shape)
        mask = np.zeros(image_shape[:2], dtype=bool)
        bh, bw = self.support.shape
        mask[self.anchor_y:self.anchor_y + bh, self.anchor_x:self.anchor_x + bw] = self.support
        return mask


def key_embed(images: np.ndarray, pattern: KeyPattern) -> np.ndarray:
    """Additive embedding, clamped to [0, 255]. Accepts one image or a batch."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3:] != pattern.image_shape:
        raise PatternError(f"pattern shape {pattern.image_shape} does not match image {images.shape[-3:]}")
    mask = pattern.footprint()
    out = images.copy()
    out[..., mask, :] = np.clip(out[..., mask, :] + pattern.offsets()[mask], 0.0, PIXEL_MAX)
    return out


def logo_embed(images: np.ndarray, pattern: LogoPattern) -> np.ndarray:
    """Blend ``(1 - alpha) * X + alpha * logo`` over the logo's support only."""
    images = np.asarray(images, dtype=np.float64)
    pattern.check_fits(images.shape[-3:])
    bh, bw, _ = pattern.bitmap.shape
    ys = slice(pattern.anchor_y, pattern.anchor_y + bh)
    xs = slice(pattern.anchor_x, pattern.anchor_x + bw)
    logo = pattern.bitmap * (pattern.value_scale / PIXEL_MAX)
    support = pattern.support
    out = images.copy()
    region = out[..., ys, xs, :]
    blended = np.clip((1.0 - pattern.alpha) * region + pattern.alpha * logo, 0.0, PIXEL_MAX)
    region[..., support, :] = blended[..., support, :]
    return out


def embed(images: np.ndarray, pattern) -> np.ndarray:
    if isinstance(pattern, KeyPattern):
        return key_embed(images, pattern)
    if isinstance(pattern, LogoPattern):
        return logo_embed(images, pattern)
    raise TypeError(f"unknown pattern type {type(pattern).__name__}")


def round_half_up(a) -> np.ndarray:
    return np.floor(np.asarray(a, dtype=np.float64) + 0.5).astype(np.int64)


def rasterize_coords(coords, image_shape) -> tuple[np.ndarray, np.ndarray]:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    h, w = image_shape[:2]
    xs = np.clip(round_half_up(coords[:, 0]), 0, w - 1)
    ys = np.clip(round_half_up(coords[:, 1]), 0, h - 1)
    return xs, ys


def rasterize_key(coords, image_shape, values) -> KeyPattern:
    """Map continuous ``(x, y)`` pairs onto the pixel grid.

    Collisions are kept as separate entries; their offsets sum at embed time.
    """
    xs, ys = rasterize_coords(coords, image_shape)
    return KeyPattern(xs, ys, values, tuple(image_shape))


def spread_collisions(xs, ys, image_shape) -> tuple[np.ndarray, np.ndarray]:
    """Move repeated coordinates to the nearest free pixel, in index order.

    Ties in distance resolve by (row, column). The first occurrence of a pixel
    keeps it.
    """
    h, w = image_shape[:2]
    xs, ys = np.array(xs), np.array(ys)
    if len(xs) > h * w:
        raise PatternError(f"{len(xs)} distinct pixels do not fit in a {h}x{w} image")
    taken = np.zeros((h, w), dtype=bool)
    gy, gx = np.mgrid[0:h, 0:w]
    for k in range(len(xs)):
        if taken[ys[k], xs[k]]:
            d2 = (gy - ys[k]) ** 2 + (gx - xs[k]) ** 2
            d2 = np.where(taken, np.iinfo(np.int64).max, d2)
            flat = int(np.argmin(d2))  # argmin returns the first minimum in raster order
            ys[k], xs[k] = divmod(flat, w)
        taken[ys[k], xs[k]] = True
    return xs, ys


# -- message coding ---------------------------------------------------------


@dataclass(frozen=True)
class Message:
    bits: str
    bits_per_pixel: int
    alphabet: Mapping[str, tuple] = field(hash=False)

    def __post_init__(self):
        if self.bits_per_pixel not in (1, 2):
            raise PatternError("bits_per_pixel must be 1 or 2")
        if set(self.bits) - {"0", "1"}:
            raise PatternError("bits must be a string of 0/1 characters")
        if len(self.bits) % self.bits_per_pixel:
            raise PatternError(f"{len(self.bits)} bits is not a multiple of {self.bits_per_pixel}")
        alphabet = {k: tuple(float(v) for v in np.atleast_1d(val)) for k, val in self.alphabet.items()}
        expected = {format(i, f"0{self.bits_per_pixel}b") for i in range(2 ** self.bits_per_pixel)}
        if set(alphabet) != expected:
            raise PatternError(f"alphabet keys must be exactly {sorted(expected)}")
        if len(set(alphabet.values())) != len(alphabet):
            raise PatternError("alphabet values must be distinct")
        object.__setattr__(self, "alphabet", alphabet)

    @property
    def num_pixels(self) -> int:
        return len(self.bits) // self.bits_per_pixel

    def groups(self) -> list[str]:
        b = self.bits_per_pixel
        return [self.bits[i:i + b] for i in range(0, len(self.bits), b)]


def binary_alphabet(zero: float = 100.0, one: float = 200.0) -> dict:
    """One bit per grayscale pixel; defaults follow the MNIST key variant."""
    return {"0": (zero,), "1": (one,)}


def sign_alphabet(magnitude: float = 100.0) -> dict:
    """Two bits per RGB pixel as signed offsets of fixed magnitude.

    The first bit is the sign of the red channel, the second the shared sign
    of green and blue: 00 -> (-,-,-), 01 -> (-,+,+), 10 -> (+,-,-), 11 -> (+,+,+).
    """
    m = float(magnitude)
    out = {}
    for a in "01":
        for b in "01":
            r = m if a == "1" else -m
            gb = m if b == "1" else -m
            out[a + b] = (r, gb, gb)
    return out


def raster_order(xs, ys) -> np.ndarray:
    """Indices sorting pixels left to right, top to bottom."""
    return np.lexsort((np.asarray(xs), np.asarray(ys)))


def encode_message(message: Message, coords, image_shape) -> KeyPattern:
    """Assign the message's bit groups to integer pixel coordinates in raster order."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) != message.num_pixels:
        raise PatternError(
            f"{len(coords)} pixels x {message.bits_per_pixel} bits != {len(message.bits)} message bits"
        )
    if len({(int(x), int(y)) for x, y in coords}) != len(coords):
        raise PatternError("duplicate coordinates in key pattern")
    order = raster_order(coords[:, 0], coords[:, 1])
    coords = coords[order]
    values = np.array([message.alphabet[g] for g in message.groups()], dtype=np.float64)
    channels = image_shape[2]
    if values.shape[1] != channels:
        if values.shape[1] != 1:
            raise PatternError(f"alphabet has {values.shape[1]}-channel values, image has {channels}")
        values = np.repeat(values, channels, axis=1)
    return KeyPattern(coords[:, 0], coords[:, 1], values, tuple(image_shape))


def decode_message(pattern: KeyPattern, alphabet: Mapping[str, Sequence[float]]) -> Message:
    inverse = {}
    for group, val in alphabet.items():
        inverse[tuple(float(v) for v in np.atleast_1d(val))] = group
    width = {len(g) for g in alphabet}
    if len(width) != 1:
        raise DecodeError("alphabet keys must share one length")
    bpp = width.pop()
    groups = []
    for k in raster_order(pattern.xs, pattern.ys):
        value = tuple(float(v) for v in pattern.values[k])
        group = inverse.get(value)
        if group is None and len(set(value)) == 1:
            group = inverse.get(value[:1])
        if group is None:
            raise DecodeError(
                f"pixel (x={pattern.xs[k]}, y={pattern.ys[k]}) has value {value} outside the alphabet"
            )
        groups.append(group)
    return Message("".join(groups), bpp, alphabet)
