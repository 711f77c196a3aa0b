"""Datasets: a seeded synthetic quadrant task and labeled image directories."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class DataError(ValueError):
    """Dataset files or parameters are unusable."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    regions: np.ndarray | None = None  # (N, 4) row0, col0, row1, col1 in pixels, end-exclusive
    source: str = "synthetic-quadrant"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label outside [0, classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        regions = None if self.regions is None else self.regions[idx]
        return Dataset(self.images[idx], self.labels[idx], self.class_names, regions, self.source, self.meta)


QUADRANTS = ["top-left", "top-right", "bottom-left", "bottom-right"]


def quadrant_box(label: int, image_size: int) -> tuple[int, int, int, int]:
    half = image_size // 2
    r, c = divmod(label, 2)
    return r * half, c * half, (r + 1) * half, (c + 1) * half


def _blob(rng: np.random.Generator, size: int, radius: float) -> np.ndarray:
    """Striped, colored Gaussian bump on a ``size`` x ``size`` canvas, peak near 1."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    envelope = np.exp(-r2 / (2.0 * (radius / 2.0) ** 2))
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.35, 0.7)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.6 + 0.4 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    color = rng.uniform(0.6, 1.0, size=3)
    return (envelope * stripes)[..., None] * color


def synth_quadrant(
    n_per_class: int,
    image_size: int = 64,
    seed: int = 0,
    patch_size: int = 8,
    radius: float = 7.0,
    noise: float = 0.35,
) -> Dataset:
    """Noise images with one bright textured blob; the label is the blob's quadrant.

    The blob lies entirely inside its quadrant, whose pixel box is recorded
    as the ground-truth region. Samples are ordered class-major and fully
    determined by ``seed``.
    """
    if image_size % 2 or image_size % patch_size:
        raise DataError(f"image_size {image_size} must be divisible by 2 and by patch_size {patch_size}")
    half = image_size // 2
    span = int(np.ceil(2 * radius)) + 1
    if span > half:
        raise DataError(f"blob of radius {radius} does not fit a {half}px quadrant")
    rng = np.random.default_rng(seed)
    n = 4 * n_per_class
    images = np.empty((n, image_size, image_size, 3), dtype=np.float32)
    labels = np.repeat(np.arange(4), n_per_class)
    regions = np.empty((n, 4), dtype=np.int64)
    for i, label in enumerate(labels):
        img = rng.uniform(0.0, noise, size=(image_size, image_size, 3))
        r0, c0, r1, c1 = quadrant_box(int(label), image_size)
        top = r0 + rng.integers(0, half - span + 1)
        left = c0 + rng.integers(0, half - span + 1)
        blob = _blob(rng, span, radius)
        window = img[top : top + span, left : left + span]
        img[top : top + span, left : left + span] = window + (1.0 - window) * blob
        images[i] = np.clip(img, 0.0, 1.0)
        regions[i] = (r0, c0, r1, c1)
    meta = {"seed": seed, "radius": radius, "noise": noise}
    return Dataset(images, labels.astype(np.int64), list(QUADRANTS), regions, "synthetic-quadrant", meta)


# ---------------------------------------------------------------------------
# image directories
# ---------------------------------------------------------------------------

IMAGE_SUFFIXES = (".ppm", ".png")


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 with maxval 255; ``image`` is ``(H, W, 3)`` in [0, 1]."""
    pixels = to_uint8(image)
    h, w, _ = pixels.shape
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    os.replace(tmp, path)


def load_image_dir(path) -> Dataset:
    """Load ``<root>/<class>/<file>.{ppm,png}``; classes and files sorted by name."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class directories under {root}")
    images, labels, shape = [], [], None
    for label, name in enumerate(classes):
        files = sorted(f for f in (root / name).iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class {name!r} has no .ppm/.png images")
        for f in files:
            img = read_image(f)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise DataError(f"{f}: size {img.shape[:2]} differs from {shape[:2]}")
            images.append(img)
            labels.append(label)
    return Dataset(
        np.stack(images).astype(np.float32),
        np.asarray(labels, dtype=np.int64),
        classes,
        None,
        "image-dir",
        {"path": str(root)},
    )


def write_image_dir(dataset: Dataset, path) -> None:
    root = Path(path)
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        d = root / dataset.class_names[label]
        d.mkdir(parents=True, exist_ok=True)
        write_ppm(d / f"{i:05d}.ppm", img)
