"""Labeled image datasets: MNIST IDX files, JSON attribute manifests, and a
procedural synthetic corpus.

All images are float32 arrays shaped N x C x H x W with pixel values in
[-1, 1]; labels are int64 arrays in [0, num_classes).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DEFAULT_BATCH_SIZE = 12

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values must lie in [-1, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.num_classes, name or self.name)


@dataclass
class ImageBatch:
    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class AttributeManifest:
    entries: list[tuple[str, int]]
    num_classes: int

    def __post_init__(self):
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise DatasetError("manifest contains duplicate paths")

    @classmethod
    def from_json(cls, path) -> "AttributeManifest":
        doc = json.loads(Path(path).read_text())
        try:
            entries = [(str(e["path"]), int(e["label"])) for e in doc["entries"]]
            return cls(entries, int(doc["num_classes"]))
        except (KeyError, TypeError) as err:
            raise DatasetError(f"malformed manifest {path}: {err}") from err

    def to_json(self, path) -> None:
        doc = {
            "num_classes": self.num_classes,
            "entries": [{"path": p, "label": lab} for p, lab in self.entries],
        }
        Path(path).write_text(json.dumps(doc, indent=2))


def normalize(raw: np.ndarray) -> np.ndarray:
    """Map uint8 pixels [0, 255] linearly onto [-1, 1]."""
    return raw.astype(np.float32) / 127.5 - 1.0


def denormalize(images: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`, rounding back to uint8."""
    return np.clip(np.rint((np.asarray(images) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def resize(images: np.ndarray, resolution: int) -> np.ndarray:
    if images.shape[-1] == resolution and images.shape[-2] == resolution:
        return images
    out = F.interpolate(torch.from_numpy(images), size=(resolution, resolution),
                        mode="bilinear", align_corners=False)
    # bilinear weights are convex, so only float rounding can leave the range
    return out.clamp_(-1.0, 1.0).numpy()


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing IDX file: {path}")
    data = path.read_bytes()
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise DatasetError(f"{path.name}: magic number 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    body = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise DatasetError(f"{path.name}: header declares {dims} but holds {body.size} bytes")
    return body.reshape(dims)


def _find(root: Path, stem: str) -> Path:
    # accept both the canonical "-idx3-ubyte" and the common ".idx3-ubyte" spelling
    for name in (stem, stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    return root / stem


def load_mnist(root, split: str = "train", resolution: int = 32) -> Dataset:
    if split not in MNIST_FILES:
        raise DatasetError(f"unknown split {split!r}")
    root = Path(root)
    img_name, lab_name = MNIST_FILES[split]
    raw = _read_idx(_find(root, img_name), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(_find(root, lab_name), IDX_LABELS_MAGIC, 1)
    if len(raw) != len(labels):
        raise DatasetError(f"{len(raw)} images but {len(labels)} labels in {split} split")
    images = resize(normalize(raw)[:, None], resolution)
    return Dataset(images, labels.astype(np.int64), 10, f"mnist-{split}")


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}[array.ndim]
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def _center_square(img: Image.Image) -> Image.Image:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    return img.crop((left, top, left + side, top + side))


def load_manifest_dataset(root, manifest: AttributeManifest, resolution: int,
                          channels: int = 3, name: str = "manifest") -> Dataset:
    root = Path(root)
    mode = {1: "L", 3: "RGB"}[channels]
    images, labels = [], []
    for rel, label in manifest.entries:
        if not 0 <= label < manifest.num_classes:
            raise DatasetError(f"{rel}: label {label} outside [0, {manifest.num_classes})")
        try:
            with Image.open(root / rel) as img:
                img = _center_square(img.convert(mode))
                img = img.resize((resolution, resolution), Image.BILINEAR)
                arr = np.asarray(img, dtype=np.uint8)
        except (OSError, ValueError) as err:
            raise DatasetError(f"cannot read image {rel}: {err}") from err
        images.append(arr[None] if channels == 1 else arr.transpose(2, 0, 1))
        labels.append(label)
    return Dataset(normalize(np.stack(images)), np.array(labels), manifest.num_classes, name)


# Procedural shapes. Every class is a different primitive; position, size and
# stroke thickness are the per-sample content.

def _shape_mask(cls: int, yy, xx, cy, cx, r, t):
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    if cls == 0:    # horizontal bar
        return (np.abs(dy) <= t) & (np.abs(dx) <= r)
    if cls == 1:    # vertical bar
        return (np.abs(dx) <= t) & (np.abs(dy) <= r)
    if cls == 2:    # ring
        return np.abs(dist - r) <= t
    if cls == 3:    # square outline
        cheb = np.maximum(np.abs(dy), np.abs(dx))
        return np.abs(cheb - r) <= t
    if cls == 4:    # plus
        return ((np.abs(dy) <= t) | (np.abs(dx) <= t)) & (np.maximum(np.abs(dy), np.abs(dx)) <= r)
    if cls == 5:    # filled disk
        return dist <= r
    if cls == 6:    # diagonal stroke
        return (np.abs(dy - dx) <= t * 1.4) & (np.abs(dx) <= r * 0.8)
    if cls == 7:    # x
        return ((np.abs(dy - dx) <= t * 1.4) | (np.abs(dy + dx) <= t * 1.4)) & (np.abs(dx) <= r * 0.8)
    raise ValueError(cls)


MAX_SYNTHETIC_CLASSES = 8


def make_synthetic(n: int, num_classes: int = 4, resolution: int = 32, seed: int = 0) -> Dataset:
    if n < num_classes:
        raise DatasetError(f"need n >= num_classes, got {n} < {num_classes}")
    if not 2 <= num_classes <= MAX_SYNTHETIC_CLASSES:
        raise DatasetError(f"num_classes must be in [2, {MAX_SYNTHETIC_CLASSES}]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float32)
    images = np.full((n, 1, resolution, resolution), -1.0, dtype=np.float32)
    s = resolution / 32.0
    for i, cls in enumerate(labels):
        r = rng.uniform(6, 10) * s
        t = rng.uniform(1.0, 2.5) * s
        cy, cx = rng.uniform(r + 2 * s, resolution - r - 2 * s, size=2)
        intensity = rng.uniform(0.6, 1.0)
        images[i, 0][_shape_mask(int(cls), yy, xx, cy, cx, r, t)] = intensity
    return Dataset(images, labels, num_classes, f"synthetic-{num_classes}")


def num_batches(dataset: Dataset, batch_size: int) -> int:
    return len(dataset) // batch_size


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset: Dataset, batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0,
            shuffle: bool = True, epoch: int = 0, start: int = 0) -> Iterator[ImageBatch]:
    """Yield one epoch of batches; the final partial batch is dropped.

    The order is a pure function of ``(seed, epoch)``. ``start`` skips the
    first batches of the epoch, which is how resumed runs rejoin the stream.
    """
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    if batch_size > len(dataset):
        raise DatasetError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
    order = epoch_order(len(dataset), seed, epoch, shuffle)
    for b in range(start, num_batches(dataset, batch_size)):
        idx = order[b * batch_size:(b + 1) * batch_size]
        yield ImageBatch(torch.from_numpy(dataset.images[idx]), torch.from_numpy(dataset.labels[idx]))


def batch_stream(dataset: Dataset, batch_size: int, seed: int, start_step: int = 0,
                 shuffle: bool = True) -> Iterator[ImageBatch]:
    """Endless stream over epochs, positioned at global step ``start_step``."""
    per_epoch = num_batches(dataset, batch_size)
    if per_epoch == 0:
        raise DatasetError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
    epoch, offset = divmod(start_step, per_epoch)
    while True:
        yield from batches(dataset, batch_size, seed, shuffle, epoch=epoch, start=offset)
        epoch, offset = epoch + 1, 0
