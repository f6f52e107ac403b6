#!/usr/bin/env python3
"""
Dataset ingestion for PriorForge
Loads MNIST (IDX), CIFAR-10 (binary batches), PNG folders and a synthetic corpus,
normalizes everything to N x C x 32 x 32 in [-1, 1], and yields seeded mini-batches
"""

import gzip
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import matplotlib
matplotlib.use('Agg')  # Use non-interactive backend

import matplotlib.image as mpimg
import numpy as np
import requests
import torch
import torch.nn.functional as F

from checkpoint import atomic_write

try:
    from config import (
        IMAGE_SIZE, MNIST_MIRROR, MNIST_FILES, DOWNLOAD_TIMEOUT_SECONDS,
        DATA_ENV_VAR, SUPPORTED_CHANNELS, default_data_root
    )
except ImportError:
    IMAGE_SIZE = 32
    MNIST_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist"
    MNIST_FILES = {
        'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
        'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
    }
    DOWNLOAD_TIMEOUT_SECONDS = 60
    DATA_ENV_VAR = "PRIORFORGE_DATA"
    SUPPORTED_CHANNELS = (1, 3)

    def default_data_root() -> Optional[Path]:
        root = os.environ.get(DATA_ENV_VAR)
        return Path(root).expanduser() if root else None

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10
MNIST_CLASSES = 10


class DataLoadError(Exception):
    """Raised for unreadable, corrupted or inconsistent datasets"""
    pass


@dataclass
class DatasetHandle:
    """Images in [-1, 1] with optional integer labels"""
    images: torch.Tensor  # N x C x 32 x 32, float32
    name: str
    labels: Optional[torch.Tensor] = None  # N, int64
    num_classes: int = 0
    paths: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit pixel values to [-1, 1] via x / 127.5 - 1"""
    return pixels.astype(np.float32) / 127.5 - 1.0


def subset(dataset: DatasetHandle, n: int) -> DatasetHandle:
    """First n rows of a dataset (n <= 0 keeps everything)"""
    if n <= 0 or n >= len(dataset):
        return dataset
    return DatasetHandle(
        images=dataset.images[:n],
        name=f"{dataset.name}[:{n}]",
        labels=dataset.labels[:n] if dataset.labels is not None else None,
        num_classes=dataset.num_classes,
        paths=dataset.paths[:n],
    )


# ============================================================================
# MNIST (IDX)
# ============================================================================

def _read_bytes(path: Path) -> bytes:
    if path.suffix == '.gz':
        with gzip.open(path, 'rb') as f:
            return f.read()
    return path.read_bytes()


def _find_idx_file(root: Path, name: str) -> Path:
    for candidate in (root / name, root / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DataLoadError(f"IDX file not found: {root / name}[.gz]")


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Parse an IDX3 image file into an N x rows x cols uint8 array"""
    if len(raw) < 16:
        raise DataLoadError(f"IDX image file truncated: {len(raw)} bytes, header needs 16")
    magic, n, rows, cols = np.frombuffer(raw[:16], dtype='>u4')
    if magic != IDX_IMAGES_MAGIC:
        raise DataLoadError(f"Bad IDX image magic 0x{int(magic):08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + int(n) * int(rows) * int(cols)
    if len(raw) < expected:
        raise DataLoadError(f"IDX image file truncated: {len(raw)} bytes, header declares {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=expected - 16, offset=16)
    return pixels.reshape(int(n), int(rows), int(cols))


def parse_idx_labels(raw: bytes) -> np.ndarray:
    """Parse an IDX1 label file into an N uint8 array"""
    if len(raw) < 8:
        raise DataLoadError(f"IDX label file truncated: {len(raw)} bytes, header needs 8")
    magic, n = np.frombuffer(raw[:8], dtype='>u4')
    if magic != IDX_LABELS_MAGIC:
        raise DataLoadError(f"Bad IDX label magic 0x{int(magic):08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) < 8 + int(n):
        raise DataLoadError(f"IDX label file truncated: {len(raw)} bytes, header declares {8 + int(n)}")
    return np.frombuffer(raw, dtype=np.uint8, count=int(n), offset=8)


def load_mnist(path: str, split: str = 'train') -> DatasetHandle:
    """
    Load an MNIST split from a directory of IDX files (plain or .gz).

    28 x 28 digits are zero-padded by 2 pixels per side to 32 x 32, then mapped to [-1, 1].

    Args:
        path: Directory holding the IDX files
        split: 'train' or 'test'
    """
    if split not in MNIST_FILES:
        raise DataLoadError(f"Unknown MNIST split '{split}', expected one of {list(MNIST_FILES)}")
    root = Path(path).expanduser()
    images_name, labels_name = MNIST_FILES[split]

    images = parse_idx_images(_read_bytes(_find_idx_file(root, images_name)))
    labels = parse_idx_labels(_read_bytes(_find_idx_file(root, labels_name)))

    if images.shape[0] != labels.shape[0]:
        raise DataLoadError(f"MNIST count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and labels.max() >= MNIST_CLASSES:
        raise DataLoadError(f"MNIST label out of range: {int(labels.max())}")

    rows, cols = images.shape[1:]
    pad_r, pad_c = IMAGE_SIZE - rows, IMAGE_SIZE - cols
    if pad_r < 0 or pad_c < 0 or pad_r % 2 or pad_c % 2:
        raise DataLoadError(f"Cannot pad {rows} x {cols} digits to {IMAGE_SIZE} x {IMAGE_SIZE}")
    padded = np.pad(images, ((0, 0), (pad_r // 2, pad_r // 2), (pad_c // 2, pad_c // 2)))

    logger.info(f"Loaded MNIST {split}: {images.shape[0]} images from {root}")
    return DatasetHandle(
        images=torch.from_numpy(to_unit_range(padded)[:, None, :, :].copy()),
        name=f"mnist-{split}",
        labels=torch.from_numpy(labels.astype(np.int64)),
        num_classes=MNIST_CLASSES,
    )


def fetch_mnist(out_dir: str, session: Optional[requests.Session] = None) -> List[Path]:
    """
    Download the MNIST IDX archives (.gz) into out_dir; existing files are kept.

    Returns:
        Paths of the archives on disk
    """
    target = Path(out_dir).expanduser()
    target.mkdir(parents=True, exist_ok=True)
    http = session or requests.Session()
    written = []

    for names in MNIST_FILES.values():
        for name in names:
            dest = target / f"{name}.gz"
            if dest.exists():
                logger.info(f"Already present: {dest}")
                written.append(dest)
                continue
            url = f"{MNIST_MIRROR}/{name}.gz"
            try:
                response = http.get(url, timeout=DOWNLOAD_TIMEOUT_SECONDS)
                response.raise_for_status()
            except requests.RequestException as e:
                logger.warning(f"Failed to fetch {url}: {e}")
                raise DataLoadError(f"Download failed for {url}: {e}")
            atomic_write(dest, response.content)
            logger.info(f"Downloaded {url} -> {dest} ({len(response.content)} bytes)")
            written.append(dest)

    return written


# ============================================================================
# CIFAR-10 (binary batches)
# ============================================================================

def parse_cifar_records(raw: bytes, source: str = '<bytes>') -> Tuple[np.ndarray, np.ndarray]:
    """Parse 3073-byte CIFAR-10 records into (N x 3 x 32 x 32 uint8, N labels)"""
    if len(raw) % CIFAR_RECORD_BYTES:
        raise DataLoadError(
            f"{source}: {len(raw)} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record size"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    if labels.size and labels.max() >= CIFAR_CLASSES:
        raise DataLoadError(f"{source}: label byte {int(labels.max())} out of range")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels


def load_cifar10(path: str, split: str = 'train') -> DatasetHandle:
    """
    Load CIFAR-10 from a binary batch file or a directory of them.

    A directory yields data_batch_1..5.bin for 'train' and test_batch.bin for 'test'.
    """
    source = Path(path).expanduser()
    if source.is_dir():
        pattern = 'data_batch_*.bin' if split == 'train' else 'test_batch.bin'
        files = sorted(source.glob(pattern))
    else:
        files = [source]
    if not files or not all(f.exists() for f in files):
        raise DataLoadError(f"No CIFAR-10 batch files found at {source}")

    all_pixels, all_labels = [], []
    for batch_file in files:
        pixels, labels = parse_cifar_records(batch_file.read_bytes(), str(batch_file))
        all_pixels.append(pixels)
        all_labels.append(labels)

    pixels = np.concatenate(all_pixels)
    labels = np.concatenate(all_labels)
    logger.info(f"Loaded CIFAR-10 {split}: {pixels.shape[0]} images from {len(files)} file(s)")
    return DatasetHandle(
        images=torch.from_numpy(to_unit_range(pixels)),
        name=f"cifar10-{split}",
        labels=torch.from_numpy(labels.astype(np.int64)),
        num_classes=CIFAR_CLASSES,
    )


# ============================================================================
# PNG folders
# ============================================================================

def _to_channels(pixels: np.ndarray, channels: int) -> np.ndarray:
    """H x W[x C] uint8 -> channels x H x W float32 in [0, 255]"""
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    pixels = pixels[:, :, :3].astype(np.float32)
    if channels == 1 and pixels.shape[2] == 3:
        pixels = pixels @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        pixels = pixels[:, :, None]
    elif channels == 3 and pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return pixels.transpose(2, 0, 1)


def _center_crop(pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[1:]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return pixels[:, top:top + side, left:left + side]


def load_png(path: Path, channels: int) -> torch.Tensor:
    """Decode one PNG into a channels x 32 x 32 tensor in [-1, 1]"""
    decoded = mpimg.imread(str(path))
    if decoded.dtype != np.uint8:
        decoded = np.round(np.clip(decoded, 0.0, 1.0) * 255.0).astype(np.uint8)
    pixels = _center_crop(_to_channels(decoded, channels))

    tensor = torch.from_numpy(np.ascontiguousarray(pixels))[None]
    if tensor.shape[-1] != IMAGE_SIZE:
        tensor = F.interpolate(tensor, size=(IMAGE_SIZE, IMAGE_SIZE), mode='bilinear', align_corners=False)
    return torch.clamp(tensor[0] / 127.5 - 1.0, -1.0, 1.0)


def load_image_folder(path: str, channels: int = 3) -> DatasetHandle:
    """
    Load every PNG under a directory, in lexicographic path order.

    When every image sits in a first-level subdirectory, the sorted subdirectory names
    become class labels. Undecodable files are skipped with a warning.
    """
    if channels not in SUPPORTED_CHANNELS:
        raise DataLoadError(f"channels must be one of {SUPPORTED_CHANNELS}, got {channels}")
    root = Path(path).expanduser()
    if not root.is_dir():
        raise DataLoadError(f"Image folder not found: {root}")

    files = sorted(p for p in root.rglob('*') if p.is_file() and p.suffix.lower() == '.png')
    labeled = bool(files) and all(len(p.relative_to(root).parts) == 2 for p in files)
    class_names = sorted({p.relative_to(root).parts[0] for p in files}) if labeled else []

    images, labels, paths = [], [], []
    for file_path in files:
        try:
            images.append(load_png(file_path, channels))
        except Exception as e:
            logger.warning(f"Skipping undecodable image {file_path}: {e}")
            continue
        paths.append(str(file_path))
        if labeled:
            labels.append(class_names.index(file_path.relative_to(root).parts[0]))

    if not images:
        raise DataLoadError(f"No decodable PNG images under {root}")

    logger.info(f"Loaded {len(images)} images from {root} ({len(class_names)} classes)")
    return DatasetHandle(
        images=torch.stack(images).float(),
        name=root.name,
        labels=torch.tensor(labels, dtype=torch.int64) if labeled else None,
        num_classes=len(class_names),
        paths=paths,
    )


# ============================================================================
# Synthetic corpus
# ============================================================================

PRIMITIVES = ('bar', 'disk', 'cross', 'checker')
SLOT_CENTERS = ((16, 16), (9, 9), (9, 23), (23, 9), (23, 23), (9, 16), (23, 16), (16, 9), (16, 23))


def _draw_primitive(kind: str, cy: float, cx: float, size: float) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    if kind == 'bar':
        return (np.abs(dy) <= size / 3) & (np.abs(dx) <= size)
    if kind == 'disk':
        return dy ** 2 + dx ** 2 <= size ** 2
    if kind == 'cross':
        return ((np.abs(dx) <= 1.5) & (np.abs(dy) <= size)) | ((np.abs(dy) <= 1.5) & (np.abs(dx) <= size))
    inside = (np.abs(dx) <= size) & (np.abs(dy) <= size)
    cells = (np.floor((dx + size) / 4) + np.floor((dy + size) / 4)) % 2 == 0
    return inside & cells


def synthetic_dataset(n: int, num_classes: int, seed: int) -> DatasetHandle:
    """
    Procedural 1 x 32 x 32 images of class-dependent primitives.

    Class c draws primitive c % 4 at slot c // 4; labels are assigned round-robin.
    Position, size and intensity are jittered per image from the seeded generator.
    """
    if num_classes < 1:
        raise DataLoadError(f"num_classes must be >= 1, got {num_classes}")
    if n < num_classes:
        raise DataLoadError(f"n={n} must be >= num_classes={num_classes}")

    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = np.full((n, 1, IMAGE_SIZE, IMAGE_SIZE), -1.0, dtype=np.float32)

    for i, label in enumerate(labels):
        kind = PRIMITIVES[label % len(PRIMITIVES)]
        cy, cx = SLOT_CENTERS[(label // len(PRIMITIVES)) % len(SLOT_CENTERS)]
        cy += rng.uniform(-2.0, 2.0)
        cx += rng.uniform(-2.0, 2.0)
        size = rng.uniform(5.0, 7.0)
        intensity = rng.uniform(0.6, 1.0)
        mask = _draw_primitive(kind, cy, cx, size)
        noise = rng.normal(0.0, 0.05, size=(IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)
        images[i, 0] = np.clip(np.where(mask, intensity, -1.0) + noise, -1.0, 1.0)

    return DatasetHandle(
        images=torch.from_numpy(images),
        name=f"synthetic-{num_classes}",
        labels=torch.from_numpy(labels),
        num_classes=num_classes,
    )


# ============================================================================
# Batching
# ============================================================================

def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded permutation of range(n) for one epoch"""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset: DatasetHandle, batch_size: int, seed: int,
            epoch: int) -> Iterator[Tuple[torch.Tensor, Optional[torch.Tensor]]]:
    """
    Yield (images, labels) mini-batches in a seeded order; the partial last batch is dropped.

    labels is None for unlabeled datasets.
    """
    if batch_size < 2:
        raise DataLoadError(f"batch_size must be >= 2, got {batch_size}")
    if batch_size > len(dataset):
        raise DataLoadError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")

    order = torch.from_numpy(epoch_permutation(len(dataset), seed, epoch))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        labels = dataset.labels[idx] if dataset.labels is not None else None
        yield dataset.images[idx], labels


def num_batches(dataset: DatasetHandle, batch_size: int) -> int:
    return len(dataset) // batch_size


# ============================================================================
# Dispatcher
# ============================================================================

def load_dataset(name: str, data_path: str = '', channels: int = 1, size: int = 0,
                 num_classes: int = 0, seed: int = 0, split: str = 'train') -> DatasetHandle:
    """
    Load a dataset by name.

    Args:
        name: mnist | cifar10 | folder | synthetic
        data_path: Location; empty falls back to $PRIORFORGE_DATA/<name>
        channels: Channels for folder data
        size: Keep only the first `size` images (0 keeps all); synthetic uses it as N
        num_classes: Classes for synthetic data (0 means 4)
        seed: Seed for synthetic data
        split: train | test for mnist/cifar10
    """
    if name == 'synthetic':
        return synthetic_dataset(size or 2048, num_classes or 4, seed)

    if not data_path:
        root = default_data_root()
        if root is None:
            raise DataLoadError(f"No data_path given and ${DATA_ENV_VAR} is not set")
        data_path = str(root / name)

    if name == 'mnist':
        dataset = load_mnist(data_path, split)
    elif name == 'cifar10':
        dataset = load_cifar10(data_path, split)
    elif name == 'folder':
        dataset = load_image_folder(data_path, channels)
    else:
        raise DataLoadError(f"Unknown dataset '{name}'")
    return subset(dataset, size)
