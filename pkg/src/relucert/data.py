"""Dataset generation and ingestion: the synthetic 2-D task, IDX files
(MNIST and friends), and a simple CSV container."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .seeds import substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_MAX_REJECTIONS = 1_000_000


class PackingError(RuntimeError):
    """Rejection sampling could not place the requested points."""


class IdxFormatError(ValueError):
    """Malformed IDX file."""


@dataclass
class Dataset:
    inputs: np.ndarray          # (N, d)
    labels: np.ndarray          # (N,) int
    num_classes: int
    domain_box: tuple = None    # (lo, hi) scalars or per-coordinate arrays

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ValueError("inputs must be a nonempty (N, d) matrix")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain NaN/Inf")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must align with inputs")
        if self.labels.min(initial=0) < 0 or \
                self.labels.max(initial=0) >= self.num_classes:
            raise ValueError("labels out of range for num_classes")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       self.domain_box)


def gen_2d(seed: int, n_points: int = 12, min_sep: float = 0.16) -> Dataset:
    """Points in [0,1]^2 with pairwise l-inf separation >= min_sep and
    uniform random binary labels; incremental rejection sampling."""
    rng = substream(seed, "data")
    pts = []
    rejections = 0
    while len(pts) < n_points:
        cand = rng.uniform(0.0, 1.0, size=2)
        if all(np.max(np.abs(cand - p)) >= min_sep for p in pts):
            pts.append(cand)
        else:
            rejections += 1
            if rejections > _MAX_REJECTIONS:
                raise PackingError(
                    f"gave up after {rejections} rejections placing point "
                    f"{len(pts) + 1}/{n_points} at separation {min_sep}")
    labels = rng.integers(0, 2, size=n_points)
    return Dataset(np.asarray(pts), labels, 2, domain_box=None)


# --------------------------------------------------------------------------
# IDX format
# --------------------------------------------------------------------------

def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n, what, path):
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return buf


def load_idx(images_path, labels_path, limit: int = None) -> Dataset:
    """Big-endian IDX image/label pair; pixels scaled to [0, 1]."""
    with _open_maybe_gzip(images_path) as f:
        magic, n, rows, cols = struct.unpack(
            ">IIII", _read_exact(f, 16, "image header", images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x}")
        take = n if limit is None else min(limit, n)
        raw = _read_exact(f, take * rows * cols, "pixels", images_path)
    with _open_maybe_gzip(labels_path) as f:
        magic, n_lab = struct.unpack(
            ">II", _read_exact(f, 8, "label header", labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}")
        if n_lab != n:
            raise IdxFormatError(
                f"count mismatch: {n} images vs {n_lab} labels")
        labels = np.frombuffer(
            _read_exact(f, take, "labels", labels_path), dtype=np.uint8)
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return Dataset(images.reshape(take, rows * cols), labels.astype(np.intp),
                   10, domain_box=(0.0, 1.0))


def write_idx(ds: Dataset, images_path, labels_path, side: int = None):
    """Inverse of load_idx, for fixtures; pixels quantized back to bytes."""
    n, d = ds.inputs.shape
    side = side or int(round(np.sqrt(d)))
    if side * side != d:
        raise ValueError(f"inputs of width {d} are not square images")
    img_bytes = np.clip(np.rint(ds.inputs * 255.0), 0, 255).astype(np.uint8)
    tmp = f"{images_path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, side, side))
        f.write(img_bytes.tobytes())
    os.replace(tmp, images_path)
    tmp = f"{labels_path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())
    os.replace(tmp, labels_path)


def gen_image_classes(seed: int, n: int, num_classes: int = 10,
                      side: int = 28, noise: float = 0.12) -> Dataset:
    """Synthetic image classes: one smooth random template per class plus
    pixel noise, clipped to [0, 1].  Stands in for MNIST-scale data when
    the real files are unavailable."""
    rng = substream(seed, "imgdata")
    coarse = rng.uniform(0.0, 1.0, size=(num_classes, 7, 7))
    reps = int(np.ceil(side / 7))
    templates = np.repeat(np.repeat(coarse, reps, axis=1), reps, axis=2)
    templates = templates[:, :side, :side]
    labels = rng.integers(0, num_classes, size=n)
    imgs = templates[labels] + rng.normal(scale=noise, size=(n, side, side))
    imgs = np.clip(imgs, 0.0, 1.0)
    return Dataset(imgs.reshape(n, side * side), labels, num_classes,
                   domain_box=(0.0, 1.0))


# --------------------------------------------------------------------------
# CSV container
# --------------------------------------------------------------------------

def save_csv(ds: Dataset, path):
    d = ds.inputs.shape[1]
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        f.write(",".join([f"x{i}" for i in range(d)] + ["label"]) + "\n")
        for row, lab in zip(ds.inputs, ds.labels):
            f.write(",".join(repr(float(v)) for v in row) + f",{int(lab)}\n")
    os.replace(tmp, path)


def load_csv(path, num_classes: int = None, domain_box=None) -> Dataset:
    with open(path) as f:
        header = f.readline().strip().split(",")
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: expected trailing 'label' column")
        rows, labels = [], []
        for line in f:
            parts = line.strip().split(",")
            rows.append([float(v) for v in parts[:-1]])
            labels.append(int(parts[-1]))
    labels = np.asarray(labels)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(np.asarray(rows), labels, num_classes, domain_box)
