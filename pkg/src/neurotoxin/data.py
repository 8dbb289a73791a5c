"""Datasets, non-IID device partitions, and poisoned datasets."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .nn import Batch


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    # class centres for generated blobs; None for loaded data
    means: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.float64))
        if len(self.inputs) != len(labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.means)

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.labels)


def gen_blobs(
    num_classes: int,
    per_class: int,
    dims: int,
    spread: float,
    seed: int,
    means: np.ndarray | None = None,
    shift: float = 0.0,
) -> Dataset:
    """Isotropic Gaussian clusters, one per class, ordered by class.

    Class centres are drawn from N(0, I) unless ``means`` is given; ``shift``
    is then added to every centre coordinate, which is how out-of-distribution
    sets are produced from an existing task's centres.
    """
    if num_classes < 1 or per_class < 1 or dims < 1 or spread < 0:
        raise ValueError("num_classes, per_class, dims must be positive and spread >= 0")
    rng = np.random.default_rng(seed)
    if means is None:
        means = rng.normal(size=(num_classes, dims))
    means = np.asarray(means, dtype=np.float64) + shift
    if means.shape != (num_classes, dims):
        raise ValueError(f"means has shape {means.shape}, expected {(num_classes, dims)}")
    labels = np.repeat(np.arange(num_classes), per_class)
    inputs = means[labels] + spread * rng.normal(size=(len(labels), dims))
    return Dataset(inputs, labels, num_classes, means)


def load_digits_dataset() -> Dataset:
    """scikit-learn's 8x8 handwritten digits, scaled to [0, 1], shape (n, 1, 8, 8)."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    inputs = (raw.images / 16.0).reshape(-1, 1, 8, 8)
    return Dataset(inputs, raw.target, 10)


_FTDS_MAGIC = b"FTDS"


def save_ftds(ds: Dataset, path: str | Path) -> None:
    flat = ds.inputs.reshape(len(ds), -1)
    with open(path, "wb") as fh:
        fh.write(_FTDS_MAGIC + struct.pack("<III", len(ds), flat.shape[1], ds.num_classes))
        fh.write(flat.astype("<f8").tobytes())
        fh.write(ds.labels.astype("<i4").tobytes())


def load_ftds(path: str | Path, input_shape: tuple[int, ...] | None = None) -> Dataset:
    """Read the raw ``FTDS`` format: magic, u32 count/dims/classes, f64 inputs, i32 labels."""
    blob = Path(path).read_bytes()
    if blob[:4] != _FTDS_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    count, dims, classes = struct.unpack("<III", blob[4:16])
    n_in = count * dims * 8
    expected = 16 + n_in + count * 4
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    inputs = np.frombuffer(blob, dtype="<f8", count=count * dims, offset=16).astype(np.float64)
    labels = np.frombuffer(blob, dtype="<i4", count=count, offset=16 + n_in).astype(np.int64)
    shape = input_shape or (dims,)
    if int(np.prod(shape)) != dims:
        raise ValueError(f"input_shape {shape} incompatible with {dims} dims")
    return Dataset(inputs.reshape((count,) + tuple(shape)), labels, classes)


@dataclass(frozen=True)
class DevicePartition:
    device_indices: list[np.ndarray]

    @property
    def total_devices(self) -> int:
        return len(self.device_indices)


def partition_dirichlet(ds: Dataset, n_devices: int, alpha: float, seed: int) -> DevicePartition:
    """Label-skewed split: each class is divided across devices by Dir(alpha) shares.

    Devices that end up empty take one sample from the currently largest
    device, so every device is nonempty and every index is assigned.
    """
    n = len(ds)
    if n_devices < 1 or (n_devices > 1 and n_devices > n // 2):
        raise ValueError(f"n_devices={n_devices} too large for {n} samples (max {n // 2})")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_devices)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        shares = rng.dirichlet(np.full(n_devices, alpha))
        cuts = np.round(np.cumsum(shares)[:-1] * len(idx)).astype(int)
        for dev, part in enumerate(np.split(idx, cuts)):
            buckets[dev].extend(part.tolist())
    for dev in range(n_devices):
        if not buckets[dev]:
            donor = max(range(n_devices), key=lambda j: (len(buckets[j]), -j))
            buckets[dev].append(buckets[donor].pop())
    return DevicePartition([np.sort(np.asarray(b, dtype=np.int64)) for b in buckets])


class PoisonKind(str, Enum):
    BASE_CASE = "base_case"
    PIXEL_TRIGGER = "pixel_trigger"
    EDGE_CASE = "edge_case"


@dataclass(frozen=True)
class TriggerPatch:
    """Rectangular patch on the last two input axes.

    Vector inputs of length ``D`` are treated as a ``1 x D`` image, so a
    ``height=1`` patch there overwrites ``width`` consecutive features.
    """

    row: int
    col: int
    height: int
    width: int
    value: float

    def _view(self, inputs: np.ndarray) -> np.ndarray:
        return inputs.reshape(len(inputs), 1, -1) if inputs.ndim == 2 else inputs

    def fits(self, input_shape: tuple[int, ...]) -> bool:
        h, w = (1, input_shape[0]) if len(input_shape) == 1 else input_shape[-2:]
        return (
            min(self.row, self.col, self.height, self.width) >= 0
            and self.row + self.height <= h
            and self.col + self.width <= w
        )

    def apply(self, inputs: np.ndarray) -> np.ndarray:
        out = np.array(inputs, dtype=np.float64, copy=True)
        view = self._view(out)
        view[..., self.row : self.row + self.height, self.col : self.col + self.width] = self.value
        return out

    def present(self, inputs: np.ndarray) -> np.ndarray:
        view = self._view(np.asarray(inputs))
        region = view[..., self.row : self.row + self.height, self.col : self.col + self.width]
        return np.all(region.reshape(len(inputs), -1) == self.value, axis=1)


@dataclass(frozen=True)
class PoisonedDataset:
    base: Dataset
    target_label: int
    kind: PoisonKind
    trigger: TriggerPatch | None = None
    # indices into the dataset the samples were drawn from
    source_indices: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.base) and not np.all(self.base.labels == self.target_label):
            raise ValueError("every poisoned label must equal target_label")
        if self.kind == PoisonKind.PIXEL_TRIGGER and self.trigger is not None:
            if len(self.base) and not np.all(self.trigger.present(self.base.inputs)):
                raise ValueError("trigger missing from some poisoned inputs")

    def __len__(self) -> int:
        return len(self.base)

    def as_batch(self) -> Batch:
        return self.base.as_batch()

    def split(self, n_first: int) -> tuple[PoisonedDataset, PoisonedDataset]:
        """Split into two disjoint poison sets (e.g. attacker-train / attack-eval)."""
        if not 0 < n_first < len(self):
            raise ValueError(f"cannot split {len(self)} samples at {n_first}")
        parts = []
        for sl in (slice(0, n_first), slice(n_first, None)):
            src = None if self.source_indices is None else self.source_indices[sl]
            parts.append(PoisonedDataset(self.base.subset(np.arange(len(self))[sl]), self.target_label, self.kind, self.trigger, src))
        return parts[0], parts[1]


def make_base_case_poison(ds: Dataset, source_class: int, target_class: int, n: int, seed: int) -> PoisonedDataset:
    """``n`` samples of ``source_class`` drawn without replacement and relabelled."""
    if source_class == target_class:
        raise ValueError("source_class and target_class must differ")
    pool = np.flatnonzero(ds.labels == source_class)
    if len(pool) < n or n < 1:
        raise ValueError(f"need {n} samples of class {source_class}, only {len(pool)} available")
    chosen = np.random.default_rng(seed).choice(pool, size=n, replace=False)
    base = Dataset(ds.inputs[chosen], np.full(n, target_class), ds.num_classes)
    return PoisonedDataset(base, target_class, PoisonKind.BASE_CASE, source_indices=chosen)


def make_pixel_trigger_poison(
    ds: Dataset,
    patch: TriggerPatch,
    target_class: int,
    n: int,
    seed: int,
    exclude_target: bool = True,
) -> PoisonedDataset:
    """Stamp ``patch`` onto ``n`` random samples and relabel them to ``target_class``."""
    if not patch.fits(ds.input_shape):
        raise ValueError(f"patch {patch} out of bounds for inputs of shape {ds.input_shape}")
    pool = np.flatnonzero(ds.labels != target_class) if exclude_target else np.arange(len(ds))
    if len(pool) < n or n < 1:
        raise ValueError(f"need {n} source samples, only {len(pool)} available")
    chosen = np.random.default_rng(seed).choice(pool, size=n, replace=False)
    base = Dataset(patch.apply(ds.inputs[chosen]), np.full(n, target_class), ds.num_classes)
    return PoisonedDataset(base, target_class, PoisonKind.PIXEL_TRIGGER, patch, chosen)


def make_edge_case_poison(ood: Dataset, target_class: int) -> PoisonedDataset:
    """Relabel out-of-distribution inputs to ``target_class``; inputs untouched."""
    if len(ood) == 0:
        raise ValueError("ood dataset is empty")
    base = Dataset(ood.inputs.copy(), np.full(len(ood), target_class), ood.num_classes)
    return PoisonedDataset(base, target_class, PoisonKind.EDGE_CASE, source_indices=np.arange(len(ood)))
