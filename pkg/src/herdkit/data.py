"""CIFAR-10 binary ingestion, normalization, epoch batching and horizontal flips."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
import torch

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
CLASS_NAMES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Raw 8-bit image store, ``images`` is ``M x 3 x 32 x 32`` uint8."""

    images: np.ndarray
    labels: np.ndarray
    split: str

    def __len__(self):
        return len(self.labels)

    def subset(self, size: Optional[int]) -> "Dataset":
        """The first ``size`` records in canonical order."""
        if size is None or size >= len(self):
            return self
        return Dataset(self.images[:size], self.labels[:size], self.split)


@dataclass(frozen=True)
class ImageBatch:
    pixels: torch.Tensor  # B x 3 x 32 x 32, values in [0, 1]
    labels: torch.Tensor
    step_id: int = 0
    indices: Optional[np.ndarray] = None

    def __len__(self):
        return self.pixels.shape[0]


def decode_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % RECORD_BYTES:
        raise DataError(f"{source}: length {len(raw)} is not a multiple of {RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{source}: record {bad} has label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).copy()
    return images, labels


def load_cifar10(dataset_dir: Union[str, Path], split: str) -> Dataset:
    """Decode the canonical binary batch files of one split, preserving record order."""
    if split == "train":
        names = TRAIN_FILES
    elif split == "test":
        names = TEST_FILES
    else:
        raise DataError(f"unknown split {split!r}")
    dataset_dir = Path(dataset_dir)
    images, labels = [], []
    for name in names:
        path = dataset_dir / name
        if not path.is_file():
            raise DataError(f"missing CIFAR-10 file {path}")
        x, y = decode_records(path.read_bytes(), str(path))
        images.append(x)
        labels.append(y)
    return Dataset(np.concatenate(images), np.concatenate(labels), split)


def normalize(raw) -> np.ndarray:
    """Scale 8-bit pixels to ``[0, 1]`` float32."""
    return np.asarray(raw, dtype=np.float32) / np.float32(255.0)


def make_batch(dataset: Dataset, indices, step_id: int = 0) -> ImageBatch:
    indices = np.asarray(indices, dtype=np.int64)
    pixels = torch.from_numpy(normalize(dataset.images[indices]))
    labels = torch.from_numpy(dataset.labels[indices].copy())
    return ImageBatch(pixels, labels, step_id, indices)


def epoch_permutation(size: int, rng_seed: int) -> np.ndarray:
    return np.random.default_rng(rng_seed).permutation(size)


def epoch_batches(
    dataset: Dataset, batch_size: int, rng_seed: int, first_step: int = 0
) -> Iterator[ImageBatch]:
    """Yield the batches of one epoch in a seeded order; the last short batch is kept."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise DataError("empty dataset")
    order = epoch_permutation(len(dataset), rng_seed)
    for n, start in enumerate(range(0, len(order), batch_size)):
        yield make_batch(dataset, order[start:start + batch_size], first_step + n)


def num_batches(size: int, batch_size: int) -> int:
    return -(-size // batch_size)


def hflip(pixels: torch.Tensor) -> torch.Tensor:
    return torch.flip(pixels, dims=(-1,))


def random_hflip(batch: ImageBatch, p: float, rng_seed: int) -> ImageBatch:
    """Mirror each image independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {p}")
    mask = np.random.default_rng(rng_seed).random(len(batch)) < p
    if not mask.any():
        return batch
    pixels = batch.pixels.clone()
    sel = torch.from_numpy(mask)
    pixels[sel] = hflip(pixels[sel])
    return ImageBatch(pixels, batch.labels, batch.step_id, batch.indices)


def eval_batches(dataset: Dataset, batch_size: int = 256) -> Iterator[ImageBatch]:
    """Unaugmented, unshuffled batches for embedding extraction."""
    for start in range(0, len(dataset), batch_size):
        yield make_batch(dataset, np.arange(start, min(start + batch_size, len(dataset))))


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def verify_archive(path: Union[str, Path], expected_sha256: str) -> bool:
    return sha256_file(path) == expected_sha256.lower()
