"""Synthetic shape dataset and image-folder loading.

Four shape classes (circle, square, triangle, star), each with a class-owned
hue family (red, green, blue, yellow), rendered over muted gradient
backgrounds with a low-amplitude ripple so luminance is non-constant. Class
label therefore carries real color information, which is what conditional
colorization needs to exploit. Every image is a pure function of
(seed, index, resolution): regeneration is bitwise identical.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import colorspace as cs
from .colorspace import GrayPlane, RgbImage

CLASS_NAMES = ("circle", "square", "triangle", "star")
CLASS_HUES = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0 / 6.0)
N_CLASSES = len(CLASS_NAMES)
_SUPERSAMPLE = 2


class DatasetError(ValueError):
    """Invalid dataset request or malformed on-disk dataset."""


def _shape_mask(label: int, rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Soft [0,1] coverage mask for one shape, antialiased by supersampling."""
    n = resolution * _SUPERSAMPLE
    ys, xs = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    cx = rng.uniform(0.35, 0.65)
    cy = rng.uniform(0.35, 0.65)
    r = rng.uniform(0.18, 0.30)
    dx, dy = xs - cx, ys - cy
    if label == 0:  # circle
        hard = dx**2 + dy**2 <= r**2
    elif label == 1:  # square
        hard = np.maximum(np.abs(dx), np.abs(dy)) <= r * 0.9
    elif label == 2:  # triangle (equilateral, apex up)
        top = dy >= -r
        left = dy <= 2.0 * (dx + r * 0.9) - r
        right = dy <= 2.0 * (r * 0.9 - dx) - r
        hard = top & left & right
    elif label == 3:  # five-point star
        theta = np.arctan2(dy, dx) - rng.uniform(0, 2 * np.pi)
        frac = np.mod(5.0 * theta / (2 * np.pi) + 0.5, 1.0)
        spike = 1.0 - 2.0 * np.abs(frac - 0.5)
        thresh = r * (0.45 + 0.65 * spike)
        hard = np.sqrt(dx**2 + dy**2) <= thresh
    else:
        raise DatasetError(f"label must be in [0, {N_CLASSES - 1}], got {label}")
    soft = hard.astype(np.float64)
    soft = soft.reshape(resolution, _SUPERSAMPLE, resolution, _SUPERSAMPLE).mean(axis=(1, 3))
    return soft


def synth_image(index: int, resolution: int, seed: int) -> tuple[RgbImage, int]:
    """Render image `index`; label cycles through the classes for balance."""
    if resolution < 8:
        raise DatasetError(f"resolution must be >= 8, got {resolution}")
    label = index % N_CLASSES
    rng = np.random.default_rng(seed * 1000003 + index)

    ys, xs = np.meshgrid(
        np.linspace(0, 1, resolution), np.linspace(0, 1, resolution), indexing="ij"
    )
    # Muted gradient background with a ripple; hue family is class-agnostic.
    g0, g1 = rng.uniform(0.25, 0.75, size=2)
    tint = rng.uniform(-0.06, 0.06, size=3)
    direction = rng.uniform(0, 1)
    ramp = direction * xs + (1 - direction) * ys
    freq = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    ripple = 0.04 * np.sin(2 * np.pi * freq * (xs + ys) + phase)
    base = g0 + (g1 - g0) * ramp + ripple
    bg = np.clip(base[..., None] + tint[None, None, :], 0.0, 1.0)

    hue = (CLASS_HUES[label] + rng.uniform(-0.04, 0.04)) % 1.0
    sat = rng.uniform(0.75, 1.0)
    val = rng.uniform(0.7, 1.0)
    fg = np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float64)

    mask = _shape_mask(label, rng, resolution)[..., None]
    rgb = bg * (1.0 - mask) + fg[None, None, :] * mask
    return RgbImage(np.clip(rgb, 0.0, 1.0)), label


@dataclass
class ArrayDataset:
    """In-memory labeled image set with deterministic batching helpers."""

    images: np.ndarray  # N x H x W x 3 float32 in [0, 1]
    labels: np.ndarray  # N int64
    n_classes: int = N_CLASSES

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DatasetError(f"images must be NxHxWx3, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError("labels length must match image count")
        if self.images.shape[0] == 0:
            raise DatasetError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DatasetError("labels out of range")

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    def image(self, i: int) -> RgbImage:
        return RgbImage(self.images[i].astype(np.float64))

    def label(self, i: int) -> int:
        return int(self.labels[i])

    def gray(self, i: int) -> GrayPlane:
        return cs.gray_from_rgb(self.image(i))

    def batch_arrays(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """(B x 3 x H x W float32 in [-1, 1], B int64 labels) for training."""
        idx = np.asarray(indices, dtype=np.int64)
        imgs = self.images[idx].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(imgs * 2.0 - 1.0), self.labels[idx].copy()

    def split(self, train_fraction: float, seed: int = 0) -> tuple["ArrayDataset", "ArrayDataset"]:
        """Shuffled train/val split; both halves keep every class present."""
        if not 0.0 < train_fraction < 1.0:
            raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
        order = np.random.default_rng(seed).permutation(self.n_images)
        cut = int(round(self.n_images * train_fraction))
        cut = min(max(cut, 1), self.n_images - 1)
        tr, va = order[:cut], order[cut:]
        return (
            ArrayDataset(self.images[tr], self.labels[tr], self.n_classes),
            ArrayDataset(self.images[va], self.labels[va], self.n_classes),
        )

    def subset(self, indices) -> "ArrayDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ArrayDataset(self.images[idx], self.labels[idx], self.n_classes)


def build_synthetic(n_images: int, resolution: int, seed: int) -> ArrayDataset:
    """Render the full synthetic set in memory."""
    if n_images < 1:
        raise DatasetError(f"n_images must be >= 1, got {n_images}")
    imgs = np.empty((n_images, resolution, resolution, 3), dtype=np.float32)
    labels = np.empty(n_images, dtype=np.int64)
    for i in range(n_images):
        im, lab = synth_image(i, resolution, seed)
        imgs[i] = im.data.astype(np.float32)
        labels[i] = lab
    return ArrayDataset(imgs, labels)


def make_synthetic_dataset(out_dir, n_images: int, resolution: int, seed: int) -> Path:
    """Write PNGs plus labels.tsv; byte-identical for identical arguments."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_images):
        im, lab = synth_image(i, resolution, seed)
        name = f"img_{i:05d}.png"
        cs.write_png(im, out / name)
        rows.append(f"{name}\t{lab}\t{CLASS_NAMES[lab]}")
    (out / "labels.tsv").write_text("\n".join(rows) + "\n")
    return out


def load_image_folder(directory) -> ArrayDataset:
    """Read a labels.tsv dataset directory back into memory."""
    directory = Path(directory)
    tsv = directory / "labels.tsv"
    if not tsv.exists():
        raise DatasetError(f"missing labels.tsv in {directory}")
    names, labels = [], []
    for line_no, line in enumerate(tsv.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise DatasetError(f"labels.tsv line {line_no}: expected name<TAB>label")
        names.append(parts[0])
        labels.append(int(parts[1]))
    if not names:
        raise DatasetError(f"labels.tsv in {directory} is empty")
    imgs = []
    for name in names:
        path = directory / name
        if not path.exists():
            raise DatasetError(f"listed image missing on disk: {name}")
        imgs.append(cs.read_png(path).data.astype(np.float32))
    shapes = {a.shape for a in imgs}
    if len(shapes) != 1:
        raise DatasetError(f"images disagree on shape: {sorted(shapes)}")
    return ArrayDataset(np.stack(imgs), np.array(labels), max(labels) + 1)
