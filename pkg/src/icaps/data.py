"""Datasets: the ICDS binary format, IDX conversion and a synthetic factor dataset.

The synthetic images are elliptical strokes.  Elongation decides the label
(round "circle" motifs vs. flat "line" motifs) and also varies inside each
class; position, rotation and stroke thickness are drawn independently of the
label.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ICDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class DatasetError(ValueError):
    """Malformed or truncated dataset file."""


class DatasetValidationError(ValueError):
    """Well-formed file whose contents violate dataset invariants."""


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w] float32 in [0, 1]
    labels: np.ndarray  # [n] int64
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetValidationError(f"images must be [n, c, h, w], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetValidationError("image and label counts differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            bad = int(self.labels.max())
            raise DatasetValidationError(f"label {bad} out of range for {self.n_classes} classes")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetValidationError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == j) for j in range(self.n_classes)]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, split or self.split)


def save_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.images.shape
    pixels = np.round(np.clip(ds.images, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w))
        fh.write(pixels.tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def load_dataset(path, n_classes: int | None = None, split: str = "train") -> Dataset:
    """Read an ICDS file.  ``n_classes`` defaults to ``max(label) + 1``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, n, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    n_pix = n * c * h * w
    pix_end = _HEADER.size + n_pix
    if len(raw) < pix_end:
        raise DatasetError(f"{path}: truncated pixel block")
    if len(raw) < pix_end + 2 * n:
        raise DatasetError(f"{path}: truncated label block")
    if len(raw) > pix_end + 2 * n:
        raise DatasetError(f"{path}: trailing bytes after label block")
    pixels = np.frombuffer(raw, np.uint8, n_pix, _HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(raw, "<u2", n, pix_end).astype(np.int64)
    k = n_classes if n_classes is not None else int(labels.max()) + 1 if n else 2
    return Dataset(pixels.astype(np.float32) / 255.0, labels, k, split)


# --- synthetic factor dataset ---------------------------------------------------


@dataclass
class SyntheticSpec:
    image_size: int = 16
    n_classes: int = 2
    radius: float = 4.0
    class_gap: float = 0.4  # elongation gap between neighbouring classes
    max_offset: float = 1.0
    marker: float = 6.0  # distance of the orientation dot from the centre; 0 disables it
    thickness: tuple[float, float] = (0.6, 1.1)
    seed: int = 0

    @property
    def band_width(self) -> float:
        return (1.0 - (self.n_classes - 1) * self.class_gap) / self.n_classes

    def band(self, label: int) -> tuple[float, float]:
        lo = label * (self.band_width + self.class_gap)
        return lo, lo + self.band_width


RELEVANT_FACTORS = ("elongation",)
NUISANCE_FACTORS = ("offset_x", "offset_y", "rotation", "thickness")


@dataclass
class FactorTable:
    """Per-sample ground-truth generating factors."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    relevant: tuple[str, ...] = RELEVANT_FACTORS
    nuisance: tuple[str, ...] = NUISANCE_FACTORS

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


def render(spec: SyntheticSpec, factors: dict[str, np.ndarray]) -> np.ndarray:
    """Draw one elliptical stroke per row of ``factors``; returns ``[n, 1, s, s]``."""
    s = spec.image_size
    elong = np.asarray(factors["elongation"], dtype=np.float64)
    n = elong.size
    theta = np.linspace(0.0, 2 * np.pi, 72, endpoint=False)
    a = spec.radius
    b = a * (1.0 - elong)  # elongation 1 collapses the ellipse to a line
    px = a * np.cos(theta)[None, :]
    py = b[:, None] * np.sin(theta)[None, :]
    rot = np.asarray(factors["rotation"], dtype=np.float64)[:, None]
    cx = (s - 1) / 2 + np.asarray(factors["offset_x"], dtype=np.float64)[:, None]
    cy = (s - 1) / 2 + np.asarray(factors["offset_y"], dtype=np.float64)[:, None]
    xs = cx + np.cos(rot) * px - np.sin(rot) * py  # [n, P]
    ys = cy + np.sin(rot) * px + np.cos(rot) * py
    grid = np.arange(s, dtype=np.float64)
    dx = grid[None, None, :] - xs[:, :, None]  # [n, P, s]
    dy = grid[None, None, :] - ys[:, :, None]
    sigma = np.asarray(factors["thickness"], dtype=np.float64)[:, None, None, None]
    if spec.marker > 0:
        # a dot beyond one end of the major axis keeps rotation visible for round strokes
        xs = np.concatenate([xs, cx + spec.marker * np.cos(rot)], axis=1)
        ys = np.concatenate([ys, cy + spec.marker * np.sin(rot)], axis=1)
        dx = grid[None, None, :] - xs[:, :, None]
        dy = grid[None, None, :] - ys[:, :, None]
    d2 = dy[:, :, :, None] ** 2 + dx[:, :, None, :] ** 2  # [n, P, s, s]
    img = np.exp(-d2 / (2 * sigma**2)).max(axis=1)
    return np.clip(img, 0.0, 1.0).astype(np.float32).reshape(n, 1, s, s)


def sample_factors(spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator) -> dict:
    n = len(labels)
    lo = np.array([spec.band(j)[0] for j in range(spec.n_classes)])
    return {
        "elongation": lo[labels] + rng.uniform(0.0, spec.band_width, n),
        "offset_x": rng.uniform(-spec.max_offset, spec.max_offset, n),
        "offset_y": rng.uniform(-spec.max_offset, spec.max_offset, n),
        "rotation": rng.uniform(0.0, np.pi, n),
        "thickness": rng.uniform(*spec.thickness, n),
    }


def generate_synthetic(spec: SyntheticSpec, n: int, split: str = "train") -> tuple[Dataset, FactorTable]:
    """Balanced synthetic dataset; bit-identical for the same spec and ``n``."""
    if n < 2 * spec.n_classes:
        raise ValueError(f"need at least {2 * spec.n_classes} samples, got {n}")
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.arange(n) % spec.n_classes)
    factors = sample_factors(spec, labels, rng)
    images = np.concatenate(
        [render(spec, {k: v[i : i + 256] for k, v in factors.items()}) for i in range(0, n, 256)]
    )
    return Dataset(images, labels, spec.n_classes, split), FactorTable(factors)


# --- IDX (raw digit files) conversion -------------------------------------------


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise DatasetError(f"{path}: not an unsigned-byte IDX file")
    ndim = raw[3]
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    offset = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(raw) < offset + count:
        raise DatasetError(f"{path}: truncated IDX data")
    return np.frombuffer(raw, np.uint8, count, offset).reshape(dims)


def convert_idx(images_path, labels_path, out_path, size: int | None = 16) -> Dataset:
    """Convert IDX image/label files into an ICDS file, resizing to ``size`` pixels."""
    images = read_idx(images_path).astype(np.float32) / 255.0
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DatasetError("IDX files must hold [n, h, w] images and [n] labels")
    if size is not None and images.shape[1:] != (size, size):
        from scipy.ndimage import zoom

        factor = (1, size / images.shape[1], size / images.shape[2])
        images = np.clip(zoom(images, factor, order=1), 0.0, 1.0)
    ds = Dataset(images[:, None], labels, int(labels.max()) + 1)
    save_dataset(ds, out_path)
    return ds
