"""Desk-scale datasets, the IDX file format and named random streams."""

from __future__ import annotations

import gzip
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import IDXParseError

GROUND_TRUTH = "ground_truth"


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose ("data", "init", "batches", ...).

    Streams are keyed by ``(seed, crc32(name))`` so changing how one stream
    is consumed never perturbs another.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    provenance: str = GROUND_TRUTH

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) < 1:
            raise ValueError("a labeled set needs at least one example")
        if self.labels.shape != (len(self.inputs),):
            raise ValueError(f"{len(self.inputs)} inputs but labels of shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def is_pseudolabeled(self) -> bool:
        return self.provenance.startswith("pseudolabel")

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.inputs[idx], self.labels[idx], self.classes, self.provenance)

    def take(self, n: int) -> "LabeledSet":
        return self.subset(slice(0, n))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator["LabeledSet"]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(self), batch_size):
            yield self.subset(order[i:i + batch_size])


def split_holdout(data: LabeledSet, seed: int, fraction: float = 0.2) -> tuple[LabeledSet, LabeledSet]:
    """Seeded (train, holdout) split; the holdout gets ``fraction`` of the rows."""
    order = stream_rng(seed, "split").permutation(len(data))
    n_hold = int(round(fraction * len(data)))
    return data.subset(np.sort(order[n_hold:])), data.subset(np.sort(order[:n_hold]))


def make_blobs(classes: int, dims: int, n_per_class: int, seed: int, *,
               separation: float = 4.0, spread: float = 1.0) -> LabeledSet:
    """Isotropic Gaussian clusters with centers drawn at radius ``separation``."""
    rng = stream_rng(seed, "blobs")
    centers = rng.normal(size=(classes, dims))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    x = np.concatenate([c + spread * rng.normal(size=(n_per_class, dims)) for c in centers])
    y = np.repeat(np.arange(classes), n_per_class)
    order = rng.permutation(len(y))
    return LabeledSet(x[order], y[order], classes)


def make_spirals(classes: int, n_per_class: int, seed: int, *, noise: float = 0.2,
                 turns: float = 1.0) -> LabeledSet:
    """Interleaved 2-d spiral arms, one per class."""
    rng = stream_rng(seed, "spirals")
    xs, ys = [], []
    for k in range(classes):
        r = np.linspace(0.05, 1.0, n_per_class)
        t = 2 * math.pi * turns * r + 2 * math.pi * k / classes + noise * rng.normal(size=n_per_class)
        xs.append(np.stack([r * np.sin(t), r * np.cos(t)], axis=1))
        ys.append(np.full(n_per_class, k))
    x, y = np.concatenate(xs), np.concatenate(ys)
    order = rng.permutation(len(y))
    return LabeledSet(x[order] * 3.0, y[order], classes)


def make_pattern_images(classes: int, n_per_class: int, seed: int, *, size: int = 8,
                        channels: int = 1, noise: float = 0.6, shift: int = 1) -> LabeledSet:
    """Small images: a per-class smooth template, random contrast, jitter and noise."""
    rng = stream_rng(seed, "images")
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    templates = []
    for _ in range(classes):
        t = np.zeros((channels, size, size))
        for c in range(channels):
            for _ in range(3):
                cy, cx = rng.uniform(0, 1, 2)
                w = rng.uniform(0.12, 0.3)
                t[c] += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        templates.append(t / np.abs(t).max())
    xs = []
    for t in templates:
        contrast = rng.uniform(0.6, 1.4, size=(n_per_class, 1, 1, 1))
        imgs = contrast * t[None]
        dy = rng.integers(-shift, shift + 1, n_per_class)
        dx = rng.integers(-shift, shift + 1, n_per_class)
        imgs = np.stack([np.roll(img, (a, b), axis=(1, 2)) for img, a, b in zip(imgs, dy, dx)])
        xs.append(imgs + noise * rng.normal(size=imgs.shape))
    x = np.concatenate(xs)
    y = np.repeat(np.arange(classes), n_per_class)
    order = rng.permutation(len(y))
    return LabeledSet(x[order], y[order], classes)


# -- IDX --------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).str.lstrip("<>|"): k for k, v in _IDX_TYPES.items()}


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte string (big-endian dims, typed payload)."""
    if len(raw) < 4:
        raise IDXParseError("file shorter than the 4-byte magic", 0)
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise IDXParseError(f"bad magic 0x{int.from_bytes(raw[:4], 'big'):08X}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXParseError(f"truncated dimension header ({ndim} dims expected)", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_TYPES[code])
    need = math.prod(dims) * dtype.itemsize
    payload = raw[header:]
    if len(payload) < need:
        raise IDXParseError(f"truncated payload: {len(payload)} of {need} bytes", header + len(payload))
    if len(payload) > need:
        raise IDXParseError(f"{len(payload) - need} trailing bytes after payload", header + need)
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path) -> np.ndarray:
    return parse_idx(_read(path))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _IDX_CODES[array.dtype.str.lstrip("<>|")]
    head = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    body = array.astype(np.dtype(_IDX_TYPES[code])).tobytes()
    Path(path).write_bytes(head + body)


def load_idx(images_path, labels_path, classes: int | None = None) -> LabeledSet:
    """MNIST-style pair of IDX files -> images ``[n, 1, h, w]`` scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise IDXParseError(f"images must be a 3-d unsigned byte array (magic 0x00000803), got {images.ndim}-d", 0)
    if labels.dtype != np.uint8 or labels.ndim != 1:
        raise IDXParseError("labels must be a 1-d unsigned byte array (magic 0x00000801)", 0)
    if len(labels) != len(images):
        raise IDXParseError(f"{len(images)} images but {len(labels)} labels", 4)
    x = images.astype(np.float64)[:, None] / 255.0
    return LabeledSet(x, labels.astype(np.int64), classes or int(labels.max()) + 1)
