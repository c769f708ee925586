"""Datasets: CIFAR binary records, a synthetic shapes benchmark, preprocessing and batching."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_VARIANTS = {"cifar10": (1, 10), "cifar100": (2, 100)}  # label bytes, classes

PathLike = Union[str, os.PathLike]


@dataclass
class ImageDataset:
    images: np.ndarray            # (N, 3, H, W) float32
    labels: np.ndarray            # (N,) int64
    class_count: int
    split: str = "train"
    channel_means: Optional[np.ndarray] = None
    channel_stds: Optional[np.ndarray] = None
    normalized: bool = False

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index) -> "ImageDataset":
        return replace(self, images=self.images[index], labels=self.labels[index])

    def digest(self) -> str:
        """SHA-256 over pixel bytes and labels; identifies an evaluation split."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


# ----------------------------------------------------------------------------
# CIFAR
# ----------------------------------------------------------------------------

def load_cifar_binary(path: Union[PathLike, Sequence[PathLike]], variant: str = "cifar10",
                      split: str = "train") -> ImageDataset:
    """Parse CIFAR-10/100 binary batches; CIFAR-100 uses the fine label.

    Pixels are stored as R, G and B planes of 1024 bytes each and mapped to [0, 1].
    """
    if variant not in CIFAR_VARIANTS:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    label_bytes, classes = CIFAR_VARIANTS[variant]
    record = label_bytes + CIFAR_PIXELS
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)

    images, labels = [], []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size % record:
            offset = raw.size - raw.size % record
            raise ValueError(f"{p}: size {raw.size} is not a multiple of the {record}-byte record; "
                             f"incomplete record at byte offset {offset}")
        rows = raw.reshape(-1, record)
        lab = rows[:, label_bytes - 1].astype(np.int64)
        bad = np.flatnonzero(lab >= classes)
        if bad.size:
            i = int(bad[0])
            raise ValueError(f"{p}: label {lab[i]} >= {classes} in record {i} "
                             f"(byte offset {i * record + label_bytes - 1})")
        images.append(rows[:, label_bytes:].reshape(-1, 3, 32, 32))
        labels.append(lab)
    pixels = np.concatenate(images).astype(np.float32) / np.float32(255.0)
    return ImageDataset(pixels, np.concatenate(labels), classes, split)


def write_cifar_binary(path: PathLike, images_u8: np.ndarray, labels: np.ndarray,
                       variant: str = "cifar10", coarse_labels: Optional[np.ndarray] = None) -> None:
    """Write uint8 images (N, 3, 32, 32) in the CIFAR binary layout."""
    label_bytes, _ = CIFAR_VARIANTS[variant]
    n = images_u8.shape[0]
    rows = np.zeros((n, label_bytes + CIFAR_PIXELS), dtype=np.uint8)
    rows[:, label_bytes - 1] = labels
    if label_bytes == 2:
        rows[:, 0] = 0 if coarse_labels is None else coarse_labels
    rows[:, label_bytes:] = images_u8.reshape(n, -1)
    rows.tofile(path)


# ----------------------------------------------------------------------------
# preprocessing
# ----------------------------------------------------------------------------

def channel_stats(ds: ImageDataset) -> Tuple[np.ndarray, np.ndarray]:
    x = ds.images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize_channels(ds: ImageDataset, means, stds) -> ImageDataset:
    """Per-channel ``(x - mean) / std``; refuses to normalize twice."""
    if ds.normalized:
        raise ValueError("dataset is already normalized")
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    stds = np.asarray(stds, dtype=np.float64).reshape(-1)
    c = ds.images.shape[1]
    if means.shape != (c,) or stds.shape != (c,):
        raise ValueError(f"need {c} means and stds")
    if np.any(stds <= 0):
        raise ValueError("standard deviations must be positive")
    x = (ds.images - means.reshape(1, c, 1, 1)) / stds.reshape(1, c, 1, 1)
    return replace(ds, images=x.astype(np.float32), channel_means=means, channel_stds=stds,
                   normalized=True)


def denormalize(ds: ImageDataset) -> ImageDataset:
    if not ds.normalized:
        raise ValueError("dataset is not normalized")
    c = ds.images.shape[1]
    x = ds.images * ds.channel_stds.reshape(1, c, 1, 1) + ds.channel_means.reshape(1, c, 1, 1)
    return replace(ds, images=x.astype(np.float32), channel_means=None, channel_stds=None,
                   normalized=False)


def random_crop_pad(image: np.ndarray, pad: int, crop_size: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Zero-pad a (C, H, W) image by ``pad`` and cut a uniformly placed ``crop_size`` window."""
    c, h, w = image.shape
    if crop_size > h + 2 * pad or crop_size > w + 2 * pad:
        raise ValueError(f"crop {crop_size} exceeds padded size {h + 2 * pad}x{w + 2 * pad}")
    top = int(rng.integers(0, h + 2 * pad - crop_size + 1))
    left = int(rng.integers(0, w + 2 * pad - crop_size + 1))
    return crop_at(image, pad, crop_size, top, left)


def crop_at(image: np.ndarray, pad: int, crop_size: int, top: int, left: int) -> np.ndarray:
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, top:top + crop_size, left:left + crop_size]


def batches(ds: ImageDataset, batch_size: int, rng: Optional[np.random.Generator] = None,
            shuffle: bool = False, augment: bool = False, pad: int = 4,
            flip: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` minibatches.

    Augmentation (random crop with padding, optional horizontal flip) is only
    allowed on the train split and needs ``rng``.  Training iteration drops a
    trailing batch of a single example.
    """
    if augment and ds.split != "train":
        raise ValueError("augmentation applies to the train split only")
    if (shuffle or augment) and rng is None:
        raise ValueError("shuffling and augmentation need an rng")
    n = len(ds)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        if shuffle and idx.size == 1 and n > 1:
            break
        x = ds.images[idx]
        if augment:
            size = x.shape[-1]
            x = np.stack([random_crop_pad(img, pad, size, rng) for img in x])
            if flip:
                mask = rng.random(idx.size) < 0.5
                x[mask] = x[mask, :, :, ::-1]
        yield np.ascontiguousarray(x, dtype=np.float32), ds.labels[idx]


# ----------------------------------------------------------------------------
# synthetic benchmark
# ----------------------------------------------------------------------------

SHAPE_NAMES = ("disc", "square", "triangle", "plus", "ring", "diamond", "x_cross", "frame",
               "hbars", "vbars")


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float,
                r: float, thick: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "plus":
        return ((np.abs(dy) <= thick) & (np.abs(dx) <= r)) | ((np.abs(dx) <= thick) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (r - 1.6 * thick) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.1
    if kind == "x_cross":
        return ((np.abs(dy - dx) <= thick * 1.4) | (np.abs(dy + dx) <= thick * 1.4)) & \
            (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "frame":
        inner = (np.abs(dy) <= r * 0.85 - 1.6 * thick) & (np.abs(dx) <= r * 0.85 - 1.6 * thick)
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85) & ~inner
    if kind == "hbars":
        return (np.abs(dx) <= r) & ((np.abs(dy - r * 0.5) <= thick) | (np.abs(dy + r * 0.5) <= thick))
    if kind == "vbars":
        return (np.abs(dy) <= r) & ((np.abs(dx - r * 0.5) <= thick) | (np.abs(dx + r * 0.5) <= thick))
    raise ValueError(kind)


def _render(kind: str, size: int, rng: np.random.Generator, noise: float,
            clutter: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # smooth random background gradient
    base = rng.uniform(0.15, 0.85, 3)
    grad = rng.normal(0, 0.25, (3, 2))
    img = base[:, None, None] + (grad[:, 0, None, None] * (yy / size - 0.5)
                                 + grad[:, 1, None, None] * (xx / size - 0.5))
    # distractors: small blobs and line fragments in random colors
    for _ in range(clutter):
        color = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0, size, 2)
        if rng.random() < 0.5:
            m = (yy - cy) ** 2 + (xx - cx) ** 2 <= rng.uniform(1.0, 2.5) ** 2
        else:
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(3, size * 0.35)
            t = (yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)
            d = np.abs((yy - cy) * np.cos(ang) - (xx - cx) * np.sin(ang))
            m = (np.abs(t) <= length / 2) & (d <= 0.7)
        img[:, m] = color[:, None]
    # the class-defining figure
    r = rng.uniform(0.2, 0.34) * size
    cy, cx = rng.uniform(r * 0.9, size - r * 0.9, 2)
    thick = max(1.0, r * rng.uniform(0.16, 0.26))
    mask = _shape_mask(kind, yy, xx, cy, cx, r, thick)
    hue = rng.uniform(0, 1, 3)
    if np.abs(hue - img[:, int(cy), int(cx)]).max() < 0.3:
        hue = 1.0 - hue
    img[:, mask] = hue[:, None]
    img += rng.normal(0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_shapes(n_per_class: int, classes: int, image_size: int = 32, seed: int = 0,
                     split: str = "train", noise: float = 0.12, clutter: int = 4) -> ImageDataset:
    """Render a balanced dataset of parametric figures with randomized pose, color and clutter.

    Class ``k`` is the figure ``SHAPE_NAMES[k]``; position, scale, color,
    background gradient, distractor blobs/lines and pixel noise are random.
    """
    if not 2 <= classes <= len(SHAPE_NAMES):
        raise ValueError(f"classes must lie in [2, {len(SHAPE_NAMES)}]")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes, dtype=np.int64), n_per_class)
    labels = labels[rng.permutation(labels.size)]
    images = np.empty((labels.size, 3, image_size, image_size), dtype=np.float32)
    for i, k in enumerate(labels):
        images[i] = _render(SHAPE_NAMES[k], image_size, rng, noise, clutter)
    return ImageDataset(images, labels, classes, split)


def synthetic_splits(n_train_per_class: int, n_test_per_class: int, classes: int,
                     image_size: int = 32, seed: int = 0, **kwargs):
    """Independent train and test draws from the synthetic generator."""
    train_seed, test_seed = np.random.SeedSequence(seed).generate_state(2)
    train = synthetic_shapes(n_train_per_class, classes, image_size, int(train_seed), "train", **kwargs)
    test = synthetic_shapes(n_test_per_class, classes, image_size, int(test_seed), "test", **kwargs)
    return train, test


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
