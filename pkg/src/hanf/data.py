"""Datasets: IDX files (the MNIST family's format) and synthetic blob images."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        n = len(self.images)
        if n == 0:
            raise ValueError("dataset is empty")
        if self.labels.shape != (n,):
            raise ValueError(f"{n} images but labels have shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes)


def _read_idx(path: Path, magic: int, ndim: int, what: str) -> np.ndarray:
    raw = path.read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated at byte 0, file has {len(raw)} bytes, need 4 for the magic number")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: wrong magic 0x{got:08x} at byte 0, expected 0x{magic:08x} for {what}")
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header, {len(raw)} bytes, need {header}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise IdxFormatError(
            f"{path}: truncated at byte {len(raw)}, dims {dims} need {need} bytes (payload starts at byte {header})"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image file (N, H, W) and its label file (N,); pixels scale by 1/255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.is_file():
            raise FileNotFoundError(f"IDX file not found: {p}")
    images = _read_idx(images_path, IMAGES_MAGIC, 3, "images")
    labels = _read_idx(labels_path, LABELS_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise IdxFormatError(
            f"N mismatch: {images_path} declares {len(images)} images at bytes 4-7, "
            f"{labels_path} declares {len(labels)} labels at bytes 4-7"
        )
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (magic 0x0803 for 3-D, 0x0801 for 1-D)."""
    a = np.asarray(array, dtype=np.uint8)
    magic = {1: LABELS_MAGIC, 3: IMAGES_MAGIC}[a.ndim]
    Path(path).write_bytes(struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes())


def downsample(ds: Dataset, size: int) -> Dataset:
    """Area-average images to ``size x size`` (the side must divide evenly or is cropped)."""
    n, c, h, w = ds.images.shape
    if size == h == w:
        return ds
    fh, fw = h // size, w // size
    if fh < 1 or fw < 1:
        raise ValueError(f"cannot downsample {h}x{w} to {size}x{size}")
    x = ds.images[:, :, : fh * size, : fw * size].reshape(n, c, size, fh, size, fw).mean(axis=(3, 5))
    return Dataset(x, ds.labels, ds.num_classes)


@dataclass(frozen=True)
class SynthSpec:
    samples: int = 2000
    classes: int = 4
    size: int = 8
    channels: int = 1
    sigma: float = 0.05


def synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0) -> Dataset:
    """Per class a fixed random template in [0, 1]; samples add N(0, sigma^2) noise,
    clipped back to [0, 1].

    Labels cycle through the classes so every class has samples // classes (+1) members.
    """
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.0, 1.0, size=(spec.classes, spec.channels, spec.size, spec.size))
    labels = rng.permutation(np.arange(spec.samples) % spec.classes)
    noise = rng.normal(0.0, 1.0, size=(spec.samples, spec.channels, spec.size, spec.size))
    return Dataset(np.clip(templates[labels] + spec.sigma * noise, 0.0, 1.0), labels, spec.classes)
