"""Datasets: IDX binary ingestion and a seeded Gaussian-blob image generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError, ValidationError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # D x C x H x W, float32 in [0, 1]
    labels: np.ndarray  # D, int64
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be D x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.labels) == 0:
            raise ValidationError("dataset must be non-empty with one label per image")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def sample_probe(self, m: int, seed: int) -> np.ndarray:
        """``m`` images drawn without replacement, fixed by ``seed``."""
        rng = np.random.default_rng(seed)
        m = min(m, len(self))
        idx = np.sort(rng.choice(len(self), size=m, replace=False))
        return self.images[idx]


def synthetic_blobs(
    seed: int,
    classes: int = 4,
    samples: int = 2048,
    image_size: int = 16,
    channels: int = 3,
    jitter: float = 0.12,
    width: float = 0.18,
    noise: float = 0.25,
) -> Dataset:
    """Each class is a Gaussian blob with its own centre and colour.

    Samples jitter the centre (fraction of the image side) and add pixel noise, so the
    classes overlap a little and the task is not trivially separable.
    """
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.25, 0.75, size=(classes, 2))
    colours = rng.uniform(0.2, 1.0, size=(classes, channels))
    labels = rng.integers(0, classes, size=samples)
    grid = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    c = centres[labels] + rng.normal(0.0, jitter, size=(samples, 2))
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    blob = np.exp(-d2 / (2 * width**2))
    img = blob[:, None] * colours[labels][:, :, None, None]
    img += rng.normal(0.0, noise, size=img.shape)
    return Dataset(np.clip(img, 0.0, 1.0).astype(np.float32), labels, classes)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    try:
        with _open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read ({exc})") from exc
    if len(raw) < 4:
        raise IngestionError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IngestionError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise IngestionError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS, 3: IDX_IMAGES}.get(array.ndim)
    if magic is None:
        raise ValidationError("IDX writer supports 1-d labels and 3-d images")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair as single-channel images scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS).astype(np.int64)
    if len(images) != len(labels):
        raise IngestionError(f"{images_path}: {len(images)} images but {labels_path} has {len(labels)} labels")
    classes = num_classes or int(labels.max()) + 1
    return Dataset(images[:, None].astype(np.float32) / 255.0, labels, classes)
