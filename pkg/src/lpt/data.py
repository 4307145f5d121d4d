"""Datasets, the four data roles, synthetic data and batching."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lpt.errors import BadArgument, DegenerateSplit

ROLES = ("ln_tr", "tt_tr", "tt_val", "bank")
MAGIC = b"LPTD"


@dataclass(frozen=True)
class Example:
    id: int
    input: np.ndarray
    label: int
    corrupted: bool = False


class Dataset:
    """Immutable indexed collection of examples stored column-wise."""

    def __init__(self, ids, inputs, labels, num_classes, corrupted=None, image_shape=None):
        ids = np.array(ids, dtype=np.int64)
        inputs = np.array(inputs, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise BadArgument(f"inputs must be 2-D (n, dim), got {inputs.shape}")
        n = inputs.shape[0]
        if ids.shape != (n,) or labels.shape != (n,):
            raise BadArgument("ids, inputs and labels disagree in length")
        if len(np.unique(ids)) != n:
            raise BadArgument("example ids must be unique")
        if n and (labels.min() < 0 or labels.max() >= num_classes):
            raise BadArgument(f"labels must lie in [0, {num_classes})")
        corrupted = np.zeros(n, dtype=bool) if corrupted is None else np.array(corrupted, dtype=bool)
        if image_shape is not None:
            image_shape = tuple(int(s) for s in image_shape)
            if int(np.prod(image_shape)) != inputs.shape[1]:
                raise BadArgument(f"image_shape {image_shape} does not match dim {inputs.shape[1]}")
        for arr in (ids, inputs, labels, corrupted):
            arr.setflags(write=False)
        self.ids = ids
        self.inputs = inputs
        self.labels = labels
        self.corrupted = corrupted
        self.num_classes = int(num_classes)
        self.image_shape = image_shape

    def __len__(self):
        return self.ids.shape[0]

    def __getitem__(self, i) -> Example:
        return Example(int(self.ids[i]), self.inputs[i], int(self.labels[i]), bool(self.corrupted[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(
            self.ids[positions],
            self.inputs[positions],
            self.labels[positions],
            self.num_classes,
            self.corrupted[positions],
            self.image_shape,
        )

    def concat(self, other: "Dataset") -> "Dataset":
        if other.num_classes != self.num_classes or other.dim != self.dim:
            raise BadArgument("cannot concatenate datasets with different shapes")
        keep = ~np.isin(other.ids, self.ids)
        return Dataset(
            np.concatenate([self.ids, other.ids[keep]]),
            np.concatenate([self.inputs, other.inputs[keep]]),
            np.concatenate([self.labels, other.labels[keep]]),
            self.num_classes,
            np.concatenate([self.corrupted, other.corrupted[keep]]),
            self.image_shape,
        )

    def position_of(self) -> dict:
        return {int(i): k for k, i in enumerate(self.ids)}


@dataclass(frozen=True)
class SplitSpec:
    """Fractions for (learner-train, tester-train, tester-val, test-bank)."""

    fractions: tuple = (0.5, 0.25, 0.125, 0.125)
    seed: int = 0
    alias_bank_val: bool = False

    def validate(self):
        if len(self.fractions) != 4:
            raise BadArgument("SplitSpec needs four fractions")
        if any(f < 0 for f in self.fractions):
            raise BadArgument("split fractions must be non-negative")
        if not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
            raise BadArgument(f"split fractions sum to {sum(self.fractions)}, not 1")


@dataclass(frozen=True)
class Splits:
    ln_tr: Dataset
    tt_tr: Dataset
    tt_val: Dataset
    bank: Dataset

    def role(self, name) -> Dataset:
        return getattr(self, name)

    @property
    def aliased(self) -> bool:
        return self.tt_val is self.bank


def split_sizes(n: int, fractions) -> list:
    """Largest-remainder apportionment; ties go to the lower role index."""
    raw = [f * n for f in fractions]
    sizes = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def make_splits(dataset: Dataset, spec: SplitSpec) -> Splits:
    """Deterministic disjoint partition of ``dataset`` into the four roles.

    With ``alias_bank_val`` the tester-val and bank chunks are merged and the
    same subset serves both roles.
    """
    spec.validate()
    if len(dataset) == 0:
        raise DegenerateSplit("dataset is empty")
    sizes = split_sizes(len(dataset), spec.fractions)
    if min(sizes) == 0:
        raise DegenerateSplit(f"split sizes {sizes} contain an empty role")
    perm = np.random.default_rng(spec.seed).permutation(len(dataset))
    bounds = np.cumsum([0] + sizes)
    parts = [np.sort(perm[bounds[i] : bounds[i + 1]]) for i in range(4)]
    ln_tr, tt_tr, tt_val, bank = (dataset.subset(p) for p in parts)
    if spec.alias_bank_val:
        shared = dataset.subset(np.sort(np.concatenate([parts[2], parts[3]])))
        return Splits(ln_tr, tt_tr, shared, shared)
    return Splits(ln_tr, tt_tr, tt_val, bank)


def _moons(t, label):
    if label == 0:
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    return np.stack([1 - np.cos(t), 0.5 - np.sin(t)], axis=1)


def _spirals(t, label):
    r = t / (3 * np.pi)
    ang = t + label * np.pi
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1) * 2


def synth_two_class(n: int, noise: float = 0.1, corrupt_frac: float = 0.0, seed: int = 0, shape="moons") -> Dataset:
    """Two interleaved 2-D classes (moons or spirals) with label corruption.

    Labels alternate by id. ``floor(corrupt_frac * n)`` examples get their label
    flipped and are flagged ``corrupted``.
    """
    if n < 4:
        raise BadArgument("synth_two_class needs n >= 4")
    if not 0 <= corrupt_frac <= 0.5:
        raise BadArgument("corrupt_frac must lie in [0, 0.5]")
    if noise < 0:
        raise BadArgument("noise must be non-negative")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    inputs = np.zeros((n, 2))
    for label in (0, 1):
        idx = np.flatnonzero(labels == label)
        if shape == "moons":
            pts = _moons(rng.uniform(0, np.pi, idx.size), label) - np.array([0.5, 0.25])
        elif shape == "spirals":
            pts = _spirals(rng.uniform(0.5 * np.pi, 3 * np.pi, idx.size), label)
        else:
            raise BadArgument(f"unknown synthetic shape {shape!r}")
        inputs[idx] = pts
    inputs = inputs + noise * rng.standard_normal(inputs.shape)
    data = Dataset(np.arange(n), inputs, labels, 2)
    return corrupt_labels(data, corrupt_frac, rng) if corrupt_frac > 0 else data


def corrupt_labels(dataset: Dataset, frac: float, seed) -> Dataset:
    """Reassign ``floor(frac * n)`` labels to a different class and flag them."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(dataset)
    k = math.floor(frac * n)
    labels = dataset.labels.copy()
    corrupted = dataset.corrupted.copy()
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    shift = rng.integers(1, dataset.num_classes, size=k) if dataset.num_classes > 2 else np.ones(k, dtype=np.int64)
    labels[chosen] = (labels[chosen] + shift) % dataset.num_classes
    corrupted[chosen] = True
    return Dataset(dataset.ids, dataset.inputs, labels, dataset.num_classes, corrupted, dataset.image_shape)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batch_iterator(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled mini-batches for one epoch; the final short batch is kept."""
    if batch_size < 1:
        raise BadArgument("batch_size must be >= 1")
    order = epoch_order(len(dataset), seed, epoch)
    return [dataset.subset(order[i : i + batch_size]) for i in range(0, len(dataset), batch_size)]


class BatchStream:
    """Endless batches from one data role, reshuffled each pass."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self._pending = []

    def next(self) -> Dataset:
        if not self._pending:
            self._pending = batch_iterator(self.dataset, self.batch_size, self.seed, self.epoch)[::-1]
            self.epoch += 1
        return self._pending.pop()


# ---------------------------------------------------------------- files


def write_lptd(path, dataset: Dataset):
    """Little-endian binary: "LPTD", u32 n, u32 dim, u32 classes, then {u32 label, dim x f32}."""
    rec = np.dtype([("label", "<u4"), ("x", "<f4", (dataset.dim,))])
    rows = np.zeros(len(dataset), dtype=rec)
    rows["label"] = dataset.labels
    rows["x"] = dataset.inputs
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", len(dataset), dataset.dim, dataset.num_classes))
        fh.write(rows.tobytes())


def read_lptd(path, image_shape=None) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise BadArgument(f"{path}: not an LPTD file")
    n, dim, classes = struct.unpack("<III", raw[4:16])
    rec = np.dtype([("label", "<u4"), ("x", "<f4", (dim,))])
    if len(raw) - 16 != n * rec.itemsize:
        raise BadArgument(f"{path}: expected {n} records of {rec.itemsize} bytes")
    rows = np.frombuffer(raw, dtype=rec, offset=16, count=n)
    return Dataset(np.arange(n), rows["x"].astype(np.float64), rows["label"].astype(np.int64), classes,
                   image_shape=image_shape)


def write_split_csv(path, splits: Splits):
    """One row per (example, role) membership: id,split,corrupted."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "split", "corrupted"])
        for role in ROLES:
            ds = splits.role(role)
            for i, c in zip(ds.ids, ds.corrupted):
                w.writerow([int(i), role, int(bool(c))])
