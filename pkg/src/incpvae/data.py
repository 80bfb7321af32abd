"""Dataset ingestion, normalisation and noise-injected OOD synthesis."""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffcore import generator

DATA_DIR_ENV = "INCPVAE_DATA_DIR"

# Per-dataset noise levels (σ0, σ1, σ2) for the uncertainty experiments.
NOISE_LEVELS = {
    "fashionmnist": (0.0001, 0.00028, 0.1),
    "mnist": (0.001, 0.008, 0.010),
    "cifar10": (0.01, 0.05, 0.10),
    "svhn": (0.001, 0.009, 0.010),
    "synthetic2d": (0.01, 0.05, 0.10),
    "animalmnist": (0.0001, 0.00028, 0.1),
}

# (σ3, σ4) for the detection experiments.
DETECTION_NOISE = {
    "fashionmnist": (0.00028, 0.00050),
    "cifar10": (0.05, 0.09),
    "animalmnist": (0.00028, 0.00050),
    "synthetic2d": (0.05, 0.09),
}

SOURCES = ("fashionmnist", "mnist", "cifar10", "svhn", "synthetic2d", "uniform2d", "animalmnist")

# Foreign test set for each in-distribution source.
FOREIGN = {
    "fashionmnist": "mnist",
    "mnist": "fashionmnist",
    "cifar10": "svhn",
    "svhn": "cifar10",
    "animalmnist": "mnist",
    "synthetic2d": "uniform2d",
}

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.str: k for k, v in IDX_TYPES.items()}
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


@dataclass(frozen=True)
class Dataset:
    """Images in [0, 1] stored as an (N, H, W, C) float32 array."""

    images: np.ndarray
    source: str = "synthetic2d"
    split: str = "train"
    labels: np.ndarray | None = None
    # False only for noise injected without clamping, which may leave [0, 1].
    bounded: bool = True

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float32)
        if imgs.ndim != 4:
            raise ValueError(f"images must be N×H×W×C, got shape {imgs.shape}")
        if self.bounded and imgs.size and (imgs.min() < 0 or imgs.max() > 1):
            raise ValueError(f"pixel values outside [0, 1]: [{imgs.min()}, {imgs.max()}]")
        object.__setattr__(self, "images", imgs)
        if self.labels is not None and len(self.labels) != len(imgs):
            raise ValueError("labels and images differ in length")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.shape))

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, images=self.images[idx], labels=labels)

    def subset(self, n: int, seed: int) -> "Dataset":
        """``n`` items drawn without replacement, in a seed-fixed order."""
        if n >= len(self):
            return self
        idx = generator(seed, "data").choice(len(self), size=n, replace=False)
        return self.take(np.sort(idx))


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0
    clamp: bool = True
    mu: float = field(default=0.0)

    def __post_init__(self):
        if self.mu != 0.0:
            raise ValueError("noise mean is fixed at 0")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


# ---------------------------------------------------------------- IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Decode an IDX container (optionally gzipped) to a native-endian array."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad magic {raw[:4].hex()}", offset=0)
    dtype = IDX_TYPES.get(raw[2])
    if dtype is None:
        raise FormatError(f"{path}: unknown IDX type code 0x{raw[2]:02x}", offset=2)
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension list", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: payload holds {len(raw) - header} bytes, dims {dims} need "
                          f"{expected - header}", offset=min(len(raw), expected))
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    big = array.dtype.newbyteorder(">")
    code = IDX_CODES.get(big.str)
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = array.astype(big, copy=False).tobytes()
    with open(path, "wb") as raw:
        if str(path).endswith(".gz"):
            # no file name or timestamp in the gzip header, so bytes depend only on the array
            with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as f:
                f.write(header + payload)
        else:
            raw.write(header + payload)


def load_idx(path, labels_path=None, source: str = "fashionmnist", split: str = "train",
             bounded: bool = True) -> Dataset:
    """Images from an IDX file; uint8 pixels are scaled by 1/255."""
    arr = read_idx(path)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise FormatError(f"{path}: expected 3 or 4 image dimensions, got {arr.ndim}", offset=3)
    images = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)
    labels = read_idx(labels_path) if labels_path is not None else None
    return Dataset(images, source=source, split=split, labels=labels, bounded=bounded)


def save_dataset(path, ds: Dataset) -> None:
    """Float32 IDX of the N×H×W×C images; labels go to ``<path>.labels`` when present."""
    write_idx(path, ds.images.astype(np.float32))
    if ds.labels is not None:
        write_idx(f"{path}.labels", np.asarray(ds.labels, dtype=np.uint8))


def load_dataset(path, source: str, split: str) -> Dataset:
    labels_path = Path(f"{path}.labels")
    ds = load_idx(path, labels_path if labels_path.exists() else None, source=source, split=split,
                  bounded=False)
    images = ds.images
    inside = images.size == 0 or (images.min() >= 0 and images.max() <= 1)
    return replace(ds, bounded=bool(inside))


# ---------------------------------------------------------------- CIFAR-style binary


def load_cifar_binary(path, source: str = "cifar10", split: str = "train") -> Dataset:
    """3073-byte records: label byte then R, G, B planes of 32×32, row-major."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}",
                          offset=len(raw) - len(raw) % CIFAR_RECORD)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].copy()
    planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return Dataset(images, source=source, split=split, labels=labels)


def write_cifar_binary(path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    planes = images_u8.transpose(0, 3, 1, 2).reshape(len(images_u8), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
    Path(path).write_bytes(records.tobytes())


# ---------------------------------------------------------------- synthetic


def ring_centers(k: int = 8, radius: float = 0.3, center: float = 0.5) -> np.ndarray:
    angles = 2 * np.pi * np.arange(k) / k
    return center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


SYNTH_STD = 0.03


def make_synthetic2d(n: int, seed: int, split: str = "train") -> Dataset:
    """Eight-component Gaussian ring in the unit square, as 1×2×1 "images"."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = generator(seed, "data")
    centers = ring_centers()
    comp = rng.integers(0, len(centers), size=n)
    pts = centers[comp] + SYNTH_STD * rng.standard_normal((n, 2))
    pts = np.clip(pts, 0.0, 1.0)
    return Dataset(pts.reshape(n, 1, 2, 1), source="synthetic2d", split=split, labels=comp.astype(np.uint8))


def make_uniform2d(n: int, seed: int, split: str = "test") -> Dataset:
    """Points uniform on the unit square; the foreign set for ``synthetic2d``."""
    if n <= 0:
        raise ValueError("n must be positive")
    pts = generator(seed, "data").uniform(0.0, 1.0, size=(n, 1, 2, 1))
    return Dataset(pts, source="uniform2d", split=split)


# ---------------------------------------------------------------- transforms


def add_noise(ds: Dataset, spec: NoiseSpec) -> Dataset:
    """x̃ = x + ε, ε ~ N(0, σ²) per pixel; item i of the output comes from item i."""
    if spec.sigma == 0:
        return replace(ds, images=ds.images.copy())
    eps = generator(spec.seed, "noise").standard_normal(ds.images.shape)
    noisy = ds.images.astype(np.float64) + spec.sigma * eps
    if spec.clamp:
        noisy = np.clip(noisy, 0.0, 1.0)
    return replace(ds, images=noisy.astype(np.float32), bounded=spec.clamp)


def downscale(ds: Dataset, factor: int) -> Dataset:
    """Block-average pooling by ``factor`` along height and width."""
    n, h, w, c = ds.images.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}×{w} not divisible by {factor}")
    pooled = ds.images.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))
    return replace(ds, images=np.clip(pooled, 0.0, 1.0))


# ---------------------------------------------------------------- named datasets


def resolve_data_dir(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path("data")


def _find(base: Path, stem: str) -> Path:
    for candidate in (base / stem, base / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing dataset file {base / stem}[.gz]")


def load_named(name: str, split: str = "train", data_dir=None, seed: int = 0, n: int | None = None) -> Dataset:
    """Load a dataset by source name from the data root.

    Layout under the root::

        fashionmnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
        mnist/        same as fashionmnist
        animalmnist/  same as fashionmnist
        cifar10/{data_batch_1..5,test_batch}.bin
        svhn/{train,test}.bin   (CIFAR record layout, converted offline)
    """
    if name == "synthetic2d":
        return make_synthetic2d(n or 10_000, seed=seed if split == "train" else seed + 1, split=split)
    if name == "uniform2d":
        return make_uniform2d(n or 10_000, seed=seed + 2, split=split)
    base = resolve_data_dir(data_dir) / name
    if name in ("fashionmnist", "mnist", "animalmnist"):
        prefix = "train" if split == "train" else "t10k"
        ds = load_idx(_find(base, f"{prefix}-images-idx3-ubyte"), _find(base, f"{prefix}-labels-idx1-ubyte"),
                      source=name, split=split)
    elif name == "cifar10":
        files = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        parts = [load_cifar_binary(_find(base, f), source=name, split=split) for f in files]
        ds = Dataset(np.concatenate([p.images for p in parts]), source=name, split=split,
                     labels=np.concatenate([p.labels for p in parts]))
    elif name == "svhn":
        ds = load_cifar_binary(_find(base, f"{split}.bin"), source=name, split=split)
    else:
        raise ValueError(f"unknown dataset {name!r}; expected one of {SOURCES}")
    if n is not None:
        ds = ds.subset(n, seed)
    return ds


def sigma_ood_default(name: str) -> float:
    return math.exp(1.0) if name in ("cifar10", "svhn") else math.exp(0.65)
