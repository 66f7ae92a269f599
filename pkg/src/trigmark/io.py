"""File formats: IDX datasets, pattern JSON, model and trigger-set archives.

Every format carries a leading ``format_version``. Floats are stored either
as Python ``repr`` text (JSON) or raw float64 bytes, so save/load is exact.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .classifier import MLP
from .core import KeyPattern, LabeledDataset, LogoPattern
from .pipeline import TriggerSet

FORMAT_VERSION = 1
PathLike = Union[str, Path]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


# -- IDX ---------------------------------------------------------------------


def _read_idx(path: PathLike, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset 0")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at byte offset 0, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at byte offset 4")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload != expected:
        raise FormatError(
            f"{path}: payload at byte offset {header} has {payload} bytes, dimensions {dims} declare {expected}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10) -> LabeledDataset:
    """Load big-endian IDX files (uint8 image cube plus uint8 label vector)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(f"image count {len(images)} does not match label count {len(labels)}")
    return LabeledDataset(images.astype(np.float64)[..., None], labels.astype(np.int64), num_classes)


def write_idx(images_path: PathLike, labels_path: PathLike, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 4:
        images = images[..., 0]
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- patterns ----------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "float64-le", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    if d.get("dtype") != "float64-le":
        raise FormatError(f"unsupported array dtype {d.get('dtype')!r}")
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).astype(np.float64)


def pattern_to_dict(pattern) -> dict:
    if isinstance(pattern, KeyPattern):
        rows = [[int(x), int(y), *(float(v) for v in vals)]
                for x, y, vals in zip(pattern.xs, pattern.ys, pattern.values)]
        return {"format_version": FORMAT_VERSION, "kind": "key", "image_shape": list(pattern.image_shape),
                "entries": rows}
    if isinstance(pattern, LogoPattern):
        return {"format_version": FORMAT_VERSION, "kind": "logo", "anchor": [pattern.anchor_x, pattern.anchor_y],
                "alpha": pattern.alpha, "value_scale": pattern.value_scale,
                "support_threshold": pattern.support_threshold, "bitmap": _encode_array(pattern.bitmap)}
    raise TypeError(f"unknown pattern type {type(pattern).__name__}")


def pattern_from_dict(d: dict):
    if d.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported pattern format_version {d.get('format_version')!r}")
    if d["kind"] == "key":
        rows = d["entries"]
        return KeyPattern([r[0] for r in rows], [r[1] for r in rows], [r[2:] for r in rows], tuple(d["image_shape"]))
    if d["kind"] == "logo":
        return LogoPattern(_decode_array(d["bitmap"]), d["anchor"][0], d["anchor"][1], d["alpha"],
                           d["value_scale"], d.get("support_threshold", 0.0))
    raise FormatError(f"unknown pattern kind {d['kind']!r}")


def save_pattern(path: PathLike, pattern) -> None:
    Path(path).write_text(json.dumps(pattern_to_dict(pattern), indent=1) + "\n")


def load_pattern(path: PathLike):
    return pattern_from_dict(json.loads(Path(path).read_text()))


# -- models ------------------------------------------------------------------


def save_model(path: PathLike, model: MLP) -> None:
    arrays = {f"w{i}": w for i, w in enumerate(model.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(model.biases)})
    meta = {"format_version": FORMAT_VERSION, "image_shape": list(model.image_shape), "sizes": model.sizes,
            "norm_offset": model.norm_offset, "norm_scale": model.norm_scale, "seed": model.seed}
    with open(path, "wb") as f:
        np.savez(f, meta=np.array(json.dumps(meta)), **arrays)


def load_model(path: PathLike) -> MLP:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported model format_version {meta.get('format_version')!r}")
        sizes = meta["sizes"]
        model = MLP(meta["image_shape"], sizes[1:-1], sizes[-1], seed=meta["seed"],
                    norm_offset=meta["norm_offset"], norm_scale=meta["norm_scale"])
        n = len(sizes) - 1
        model.weights = [z[f"w{i}"].copy() for i in range(n)]
        model.biases = [z[f"b{i}"].copy() for i in range(n)]
    return model


# -- trigger sets ------------------------------------------------------------


def save_trigger_set(path: PathLike, triggers: TriggerSet) -> None:
    meta = {"format_version": FORMAT_VERSION, "num_classes": triggers.num_classes,
            "label_policy": triggers.label_policy, "target": triggers.target, "seed": triggers.seed,
            "pattern_ref": triggers.pattern_ref}
    with open(path, "wb") as f:
        np.savez(f, meta=np.array(json.dumps(meta)), images=triggers.images,
                 original_labels=triggers.original_labels, assigned_labels=triggers.assigned_labels,
                 source_ids=triggers.source_ids)


def load_trigger_set(path: PathLike) -> TriggerSet:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported trigger-set format_version {meta.get('format_version')!r}")
        return TriggerSet(z["images"].copy(), z["original_labels"].copy(), z["assigned_labels"].copy(),
                          meta["num_classes"], z["source_ids"].copy(), meta["label_policy"], meta["target"],
                          meta["seed"], meta["pattern_ref"])
