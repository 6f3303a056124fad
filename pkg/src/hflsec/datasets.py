"""Image datasets: synthetic generator, IDX reader/writer, Dirichlet split."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .topology import NodeId

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# fixed so that class templates do not depend on the sampling seed
_TEMPLATE_SEED = 20240611
TEMPLATE_LO = 0.1
TEMPLATE_HI = 0.6


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class Example(NamedTuple):
    pixels: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Images ``x`` of shape (n, h, w, c) in [0, 1] with integer labels ``y``."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 4:
            raise ValueError(f"expected (n, h, w, c) pixels, got shape {x.shape}")
        if len(x) != len(y):
            raise ValueError(f"{len(x)} images but {len(y)} labels")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Example:
        return Example(self.x[i], int(self.y[i]))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])  # type: ignore[return-value]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def replace(self, x=None, y=None) -> "Dataset":
        return Dataset(self.x if x is None else x, self.y if y is None else y, self.num_classes)

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            parts[0].num_classes,
        )


@dataclass(frozen=True)
class ClientShard:
    client: NodeId
    data: Dataset

    def __post_init__(self):
        if len(self.data) < 1:
            raise ValueError(f"shard of {self.client} is empty")


@dataclass(frozen=True)
class PartitionPlan:
    alpha: float
    assignments: dict[int, np.ndarray] = field(default_factory=dict)

    def sizes(self) -> list[int]:
        return [len(self.assignments[c]) for c in sorted(self.assignments)]

    def shards(self, data: Dataset) -> list[Dataset]:
        return [data.subset(self.assignments[c]) for c in sorted(self.assignments)]


def _sylvester(m: int) -> np.ndarray:
    h = np.ones((1, 1), dtype=np.int8)
    while len(h) < m:
        h = np.block([[h, h], [h, -h]])
    return h


def class_templates(num_classes: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Distinct per-class template images with values in {0.1, 0.6}.

    Bits come from rows of a Sylvester-Hadamard matrix (skipping the constant
    row) under a fixed pixel shuffle. When the pixel count is a power of two
    every pair of templates differs in exactly half the pixels, so no class
    sits closer to the others than the rest do. Templates never touch 1.0 so
    that a white trigger patch stays visible.
    """
    h, w, c = shape
    n = h * w * c
    m = 1 << max(1, (n - 1).bit_length())
    rng = np.random.default_rng(_TEMPLATE_SEED)
    rows = _sylvester(m)[1:, :n] > 0
    rows = rows[rng.permutation(len(rows))][:, rng.permutation(n)]
    seen: set[bytes] = set()
    bits = []
    for row in rows:
        if row.tobytes() not in seen and len(bits) < num_classes:
            seen.add(row.tobytes())
            bits.append(row)
    while len(bits) < num_classes:
        row = rng.integers(0, 2, size=n).astype(bool)
        if row.tobytes() not in seen:
            seen.add(row.tobytes())
            bits.append(row)
    levels = np.array(bits, dtype=np.float64).reshape(num_classes, h, w, c)
    return TEMPLATE_LO + (TEMPLATE_HI - TEMPLATE_LO) * levels


def synth_dataset(
    num_classes: int,
    per_class: int,
    shape: tuple[int, int, int] = (8, 8, 1),
    noise: float = 0.1,
    rng_seed: int = 0,
) -> Dataset:
    """Class template plus clipped Gaussian noise, ``per_class`` images per class.

    Examples are ordered class by class.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"shape must be three positive dimensions, got {shape}")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    templates = class_templates(num_classes, shape)
    y = np.repeat(np.arange(num_classes), per_class)
    x = templates[y]
    if noise > 0:
        rng = np.random.default_rng(rng_seed)
        x = np.clip(x + noise * rng.standard_normal(x.shape), 0.0, 1.0)
    return Dataset(x, y, num_classes)


def _read_exact(buf: bytes, offset: int, n: int, path) -> bytes:
    if offset + n > len(buf):
        raise IdxTruncatedError(
            f"{path}: truncated, needed {offset + n} bytes but file has {len(buf)}"
        )
    return buf[offset : offset + n]


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    (got,) = struct.unpack(">I", _read_exact(buf, 0, 4, path))
    if got != magic:
        raise IdxMagicError(f"{path}: bad magic number 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", _read_exact(buf, 4, 4 * ndim, path))
    header = 4 + 4 * ndim
    count = int(np.prod(dims))
    body = _read_exact(buf, header, count, path)
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxCountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    k = num_classes if num_classes is not None else int(labels.max(initial=0)) + 1
    x = images.astype(np.float64)[..., None] / 255.0
    return Dataset(x, labels.astype(np.int64), max(k, 2))


def write_idx(data: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as IDX, pixels rounded to bytes."""
    n, h, w, c = data.x.shape
    if c != 1:
        raise ValueError("IDX export supports single-channel images only")
    pixels = np.rint(data.x[..., 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(data.y.astype(np.uint8).tobytes())


def dirichlet_partition(
    data: Dataset, num_clients: int, alpha: float = 0.5, rng_seed: int = 0
) -> PartitionPlan:
    """Split ``data`` over clients with per-class Dirichlet(alpha) proportions.

    Empty shards are repaired by moving one example from the largest shard.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if num_clients > len(data):
        raise ValueError(f"{num_clients} clients but only {len(data)} examples")
    rng = np.random.default_rng(rng_seed)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for k in range(data.num_classes):
        idx = np.flatnonzero(data.y == k)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(part.tolist())
    while True:
        empty = [c for c, b in enumerate(buckets) if not b]
        if not empty:
            break
        largest = max(range(num_clients), key=lambda c: (len(buckets[c]), -c))
        buckets[empty[0]].append(buckets[largest].pop())
    return PartitionPlan(
        float(alpha), {c: np.array(sorted(b), dtype=np.int64) for c, b in enumerate(buckets)}
    )
