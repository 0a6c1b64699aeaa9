"""MNIST ingestion and permuted-task construction."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IMAGES_MAGIC = 2051  # 0x00000803
LABELS_MAGIC = 2049  # 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    """Malformed IDX file."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class PermutationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Permutation:
    """Pixel reindexing: output pixel ``j`` reads input pixel ``mapping[j]``."""

    mapping: np.ndarray
    seed: Optional[int] = None
    kind: str = "full"
    square_side: Optional[int] = None

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if m.ndim != 1 or m.size == 0:
            raise PermutationError("mapping must be a non-empty 1-d array")
        if not np.array_equal(np.sort(m), np.arange(m.size)):
            raise PermutationError("mapping is not a bijection on 0..n-1")
        m.setflags(write=False)
        object.__setattr__(self, "mapping", m)

    def __len__(self) -> int:
        return self.mapping.size

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n), kind="identity")

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.mapping.size)
        return Permutation(inv, self.seed, self.kind, self.square_side)

    def then(self, other: "Permutation") -> "Permutation":
        """Permutation equivalent to applying ``self`` and then ``other``."""
        if len(other) != len(self):
            raise PermutationError("length mismatch")
        return Permutation(self.mapping[other.mapping], kind="composite")

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.mapping, np.arange(self.mapping.size)))

    def fixed_points(self) -> int:
        return int((self.mapping == np.arange(self.mapping.size)).sum())


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images in [0, 1] (one row per example) with integer labels.

    When ``permutation`` is set the stored ``base`` images are permuted on
    read, so many permuted tasks can share one copy of the pixels.
    """

    base: np.ndarray
    labels: np.ndarray
    name: str = ""
    permutation: Optional[Permutation] = None

    def __post_init__(self):
        if self.base.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("images must be 2-d and labels 1-d")
        if self.base.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.base.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.permutation is not None and len(self.permutation) != self.base.shape[1]:
            raise PermutationError(
                f"permutation of length {len(self.permutation)} on {self.base.shape[1]} pixels"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.base.shape[1]

    @property
    def images(self) -> np.ndarray:
        """Materialized (permuted) image matrix."""
        return self.rows(slice(None))

    def rows(self, index) -> np.ndarray:
        x = self.base[index]
        if self.permutation is not None:
            x = x[:, self.permutation.mapping]
        return x

    def batch(self, index) -> tuple[np.ndarray, np.ndarray]:
        return self.rows(index), self.labels[index]

    def subset(self, index, name: Optional[str] = None) -> "Dataset":
        return Dataset(self.base[index], self.labels[index], name or self.name, self.permutation)

    def materialize(self) -> "Dataset":
        return Dataset(np.ascontiguousarray(self.images), self.labels, self.name)


@dataclass(frozen=True, eq=False)
class PermutedTask:
    permutation: Permutation
    train: Dataset
    valid: Optional[Dataset]
    test: Dataset
    name: str = ""


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_header(data: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    header_len = 4 + 4 * ndim
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">i", data[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic {found}, expected {magic}")
    if len(data) < header_len:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(">" + "i" * ndim, data[4:header_len])
    expected = header_len + int(np.prod(dims))
    if len(data) < expected:
        raise TruncatedFileError(f"{path}: {len(data)} bytes, header promises {expected}")
    if len(data) > expected:
        raise IdxError(f"{path}: {len(data) - expected} trailing bytes after payload")
    return dims


def read_idx_images(path) -> np.ndarray:
    data = _read_bytes(path)
    count, rows, cols = _parse_header(data, IMAGES_MAGIC, 3, path)
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    data = _read_bytes(path)
    (count,) = _parse_header(data, LABELS_MAGIC, 1, path)
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, name: str = "") -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1] by /255."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(raw.astype(np.float64) / 255.0, labels, name or Path(images_path).name)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, side: int):
    """Write byte images/labels as IDX files (gzip when the name ends in .gz)."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), -1)
    head_i = struct.pack(">iiii", IMAGES_MAGIC, len(images), side, images.shape[1] // side)
    head_l = struct.pack(">ii", LABELS_MAGIC, len(labels))
    for path, payload in (
        (images_path, head_i + images.tobytes()),
        (labels_path, head_l + np.asarray(labels, dtype=np.uint8).tobytes()),
    ):
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wb") as f:
            f.write(payload)


def default_mnist_dir() -> Path:
    env = os.environ.get("EWC_MNIST_DIR")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data" / "mnist"


def _resolve(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / (stem + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def mnist_paths(directory=None, split: str = "train") -> tuple[Path, Path]:
    directory = Path(directory) if directory else default_mnist_dir()
    img, lab = MNIST_FILES[split]
    return _resolve(directory, img), _resolve(directory, lab)


def load_mnist(directory=None, split: str = "train") -> Dataset:
    img, lab = mnist_paths(directory, split)
    return load_idx(img, lab, name=f"mnist-{split}")


def make_permutation(n: int, seed) -> Permutation:
    """Uniform random bijection on 0..n-1 (Fisher-Yates via numpy)."""
    if n < 1:
        raise PermutationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return Permutation(rng.permutation(n), seed=_seed_int(seed))


def make_partial_permutation(side: int, square_side: int, seed) -> Permutation:
    """Shuffle only the centred ``square_side`` x ``square_side`` block of a square image."""
    if square_side < 0 or square_side > side:
        raise PermutationError(f"square of side {square_side} does not fit a {side}x{side} image")
    mapping = np.arange(side * side)
    offset = (side - square_side) // 2
    rows = np.arange(offset, offset + square_side)
    block = (rows[:, None] * side + rows[None, :]).ravel()
    rng = np.random.default_rng(seed)
    mapping[block] = block[rng.permutation(block.size)]
    return Permutation(mapping, seed=_seed_int(seed), kind="partial", square_side=square_side)


def _seed_int(seed) -> Optional[int]:
    return int(seed) if isinstance(seed, (int, np.integer)) else None


def apply_permutation(ds: Dataset, p: Permutation) -> Dataset:
    """Lazily permuted view of ``ds``; composes with any existing permutation."""
    if len(p) != ds.n_pixels:
        raise PermutationError(f"permutation of length {len(p)} on {ds.n_pixels} pixels")
    combined = p if ds.permutation is None else ds.permutation.then(p)
    return Dataset(ds.base, ds.labels, ds.name, combined)


def split(ds: Dataset, valid_fraction: float, seed) -> tuple[Dataset, Dataset]:
    if not 0.0 < valid_fraction < 1.0:
        raise ValueError(f"valid_fraction must lie in (0, 1), got {valid_fraction}")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_valid = int(round(len(ds) * valid_fraction))
    return (
        ds.subset(order[n_valid:], name=f"{ds.name}/train"),
        ds.subset(order[:n_valid], name=f"{ds.name}/valid"),
    )


def subsample(ds: Dataset, n: Optional[int], seed) -> Dataset:
    if n is None or n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return ds.subset(idx)


def make_task(
    permutation: Permutation,
    train: Dataset,
    valid: Optional[Dataset],
    test: Dataset,
    name: str = "",
) -> PermutedTask:
    return PermutedTask(
        permutation=permutation,
        train=apply_permutation(train, permutation),
        valid=None if valid is None else apply_permutation(valid, permutation),
        test=apply_permutation(test, permutation),
        name=name,
    )


def make_permuted_tasks(
    train: Dataset,
    test: Dataset,
    n_tasks: int,
    seed: int,
    valid_fraction: float = 0.1,
    train_size: Optional[int] = 10000,
    test_size: Optional[int] = None,
    permutations: Optional[Sequence[Permutation]] = None,
) -> list[PermutedTask]:
    """Build ``n_tasks`` tasks sharing one train/valid/test sample.

    ``train_size`` subsamples the training pool before the validation split
    (``None`` keeps all of it). Permutation seeds are derived from ``seed``.
    """
    pool = subsample(train, train_size, seed)
    tr, va = split(pool, valid_fraction, seed + 1)
    te = subsample(test, test_size, seed + 2)
    if permutations is None:
        seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n_tasks)
        permutations = [make_permutation(train.n_pixels, int(s)) for s in seeds]
    if len(permutations) != n_tasks:
        raise ValueError("need one permutation per task")
    names = [chr(ord("A") + i) if i < 26 else f"T{i}" for i in range(n_tasks)]
    return [make_task(p, tr, va, te, name=nm) for p, nm in zip(permutations, names)]
