"""Datasets: synthetic oriented gratings and image-folder trees.

Images are held in memory as float32 ``(n, 3, N, N)`` arrays with values in
``[0, 1]``; labels are int64.  On disk a dataset is ``root/<class>/*.ppm``
(PNG also read), 8-bit RGB, with classes mapped to labels in
lexicographic order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import ValidationError

IMAGE_SUFFIXES = (".ppm", ".png")


def worker_count(strict: bool = False) -> int:
    """Worker cap from ``SCENENET_THREADS`` (default: CPU count); strict mode is serial."""
    if strict:
        return 1
    env = os.environ.get("SCENENET_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"SCENENET_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValidationError(f"images must be (n, 3, N, N), got {self.images.shape}")
        if self.images.shape[2] != self.images.shape[3]:
            raise ValidationError(f"images must be square, got {self.images.shape[2:]}")
        if len(self.labels) != len(self.images):
            raise ValidationError("images and labels differ in length")
        if not self.classes:
            self.classes = [str(k) for k in range(int(self.labels.max()) + 1)] if len(self.labels) else []

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[-1]

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    side: int = 32
    per_class: int = 200
    sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.side < 1 or self.per_class < 1 or self.sigma < 0:
            raise ValidationError(f"invalid synthetic dataset spec {self}")


def grating(k: int, num_classes: int, side: int) -> np.ndarray:
    """Class-``k`` template: orientation pi*k/C, 2 + k cycles per image, range [0, 1]."""
    theta = np.pi * k / num_classes
    cycles = 2 + k
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    phase = 2 * np.pi * cycles * (x * np.cos(theta) + y * np.sin(theta)) / side
    return 0.5 + 0.5 * np.sin(phase)


def synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    """Noisy gratings, ``per_class`` samples of each class in class-major order."""
    rng = np.random.default_rng(spec.seed)
    n = spec.num_classes * spec.per_class
    images = np.empty((n, 3, spec.side, spec.side), dtype=np.float64)
    for k in range(spec.num_classes):
        images[k * spec.per_class:(k + 1) * spec.per_class] = grating(k, spec.num_classes, spec.side)
    if spec.sigma > 0:
        images += rng.normal(0.0, spec.sigma, images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.per_class)
    width = len(str(spec.num_classes - 1))
    classes = [f"class{k:0{width}d}" for k in range(spec.num_classes)]
    return Dataset(images.astype(np.float32), labels, classes)


def normalization_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over the whole set."""
    data = ds.images.astype(np.float64)
    mean = data.mean(axis=(0, 2, 3))
    std = data.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Read an 8-bit image file as a float ``(3, H, W)`` array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def write_image(path, image: np.ndarray) -> None:
    """Write a float ``(3, H, W)`` array in [0, 1] as an 8-bit RGB file (format from suffix)."""
    from PIL import Image

    Image.fromarray(to_uint8(image).transpose(1, 2, 0)).save(path)


def save_image_folder(ds: Dataset, root) -> Path:
    root = Path(root)
    counters: dict[int, int] = {}
    for img, label in zip(ds.images, ds.labels):
        folder = root / ds.classes[int(label)]
        folder.mkdir(parents=True, exist_ok=True)
        idx = counters.get(int(label), 0)
        counters[int(label)] = idx + 1
        write_image(folder / f"{idx:05d}.ppm", img)
    return root


def load_image_folder(root, classes_subset: Optional[int] = None, seed: int = 0,
                      strict: bool = False) -> Dataset:
    """Load ``root/<class>/*.ppm|*.png``.

    With ``classes_subset=k`` a seeded random choice of ``k`` classes is
    kept (relabelled 0..k-1 in lexicographic order).
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValidationError(f"dataset root {root} has no class directories")
    if classes_subset is not None:
        if not 1 <= classes_subset <= len(classes):
            raise ValidationError(f"classes subset {classes_subset} not in [1, {len(classes)}]")
        picked = np.random.default_rng(seed).choice(len(classes), size=classes_subset, replace=False)
        classes = [classes[i] for i in sorted(picked)]
    files, labels = [], []
    for label, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() in IMAGE_SUFFIXES:
                files.append(path)
                labels.append(label)
    if not files:
        raise ValidationError(f"dataset root {root} contains no images")
    with ThreadPoolExecutor(max_workers=worker_count(strict)) as pool:
        images = list(pool.map(read_image, files))
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ValidationError(f"images differ in size: {sorted(shapes)[:3]}")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), classes)
