"""Datasets: synthesis, few-shot sampling, stream slicing, normalization, I/O.

The on-disk container is little-endian binary::

    magic "SSTDATA1" | u32 version=1 | u32 flags (bit0 = has labels)
    | u64 N | u64 d | u32 C (0 if unlabeled)
    | N*d float64 row-major features | [N int32 labels if bit0]

CSV import expects a header row ``f0,...,f{d-1}[,label]``.

All values are immutable after construction (arrays are marked read-only)
and safe to share across threads.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import roots_hermitenorm
from scipy.stats import norm

from . import rng
from .errors import (
    BadMagicError,
    CapacityError,
    FormatVersionError,
    LabelRangeError,
    TruncatedFileError,
    ValidationError,
)

DATA_MAGIC = b"SSTDATA1"
DATA_VERSION = 1
STD_FLOOR = 1e-8

SYNTH_KINDS = ("gaussian_mixture", "xor", "rings")


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=dtype)
    if out is arr:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix with integer class labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int32))
        if self.features.ndim != 2:
            raise ValidationError("features must be a 2-d matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValidationError(
                f"labels length {self.labels.shape} does not match "
                f"{self.features.shape[0]} feature rows"
            )
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.labels.size:
            lo, hi = int(self.labels.min()), int(self.labels.max())
            if lo < 0 or hi >= self.num_classes:
                bad = int(np.argmax((self.labels < 0) | (self.labels >= self.num_classes)))
                raise LabelRangeError(
                    f"label {int(self.labels[bad])} at row {bad} outside [0, {self.num_classes})"
                )
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("features contain non-finite values")

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class UnlabeledSlice:
    """One finite chunk of the unlabeled stream (1-based slice_index)."""

    features: np.ndarray
    slice_index: int = 1
    source_id: str = "pool"

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, np.float64))
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValidationError("slice needs a 2-d matrix with at least one row")
        if self.slice_index < 1:
            raise ValidationError("slice_index must be >= 1")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("slice features contain non-finite values")

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic classification task.

    ``separation`` is the distance between adjacent class means (or XOR
    corners / ring radii) in feature units; the noise is unit Gaussian.
    """

    kind: str
    num_classes: int
    dim: int
    num_samples: int
    separation: float
    seed: int

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ValidationError(f"kind must be one of {SYNTH_KINDS}, got {self.kind!r}")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.dim < 1:
            raise ValidationError("dim must be >= 1")
        if self.num_samples < 1:
            raise ValidationError("num_samples must be >= 1")
        if self.separation < 0:
            raise ValidationError("separation must be >= 0")
        if self.kind == "xor":
            if self.num_classes != 2:
                raise ValidationError("num_classes must be 2 for kind=xor")
            if self.dim < 2:
                raise ValidationError("dim must be >= 2 for kind=xor")
        if self.kind == "rings" and self.dim < 2:
            raise ValidationError("dim must be >= 2 for kind=rings")
        if self.kind == "gaussian_mixture" and self.num_classes > self.dim:
            raise ValidationError(
                f"num_classes ({self.num_classes}) must be <= dim ({self.dim}) "
                "for kind=gaussian_mixture (class means sit on coordinate axes)"
            )


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature mean and (floored) standard deviation, fitted on S only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean, np.float64))
        object.__setattr__(self, "std", _frozen(self.std, np.float64))
        if np.any(self.std < STD_FLOOR):
            raise ValidationError(f"std entries must be >= {STD_FLOOR}")


def gaussian_means(spec: SynthSpec) -> np.ndarray:
    """Class means: class c sits at (separation/sqrt(2)) * e_c, so every pair
    of means is exactly ``separation`` apart."""
    a = spec.separation / np.sqrt(2.0)
    means = np.zeros((spec.num_classes, spec.dim))
    means[np.arange(spec.num_classes), np.arange(spec.num_classes)] = a
    return means


def synthesize(spec: SynthSpec) -> LabeledDataset:
    """Generate a dataset from ``spec``; deterministic given its seed.

    Rows cycle through the classes (row i has label i mod C, XOR cycles its
    four corners), so class counts never differ by more than one.
    """
    n, d, c = spec.num_samples, spec.dim, spec.num_classes
    stream = rng.Stream(rng.derive(spec.seed, 0x5359_4E54))
    noise = stream.normal(n * d).reshape(n, d)
    if spec.kind == "gaussian_mixture":
        labels = (np.arange(n) % c).astype(np.int32)
        features = gaussian_means(spec)[labels] + noise
    elif spec.kind == "xor":
        h = spec.separation / 2.0
        corners = np.array([[h, h], [-h, h], [h, -h], [-h, -h]])
        parity = np.array([0, 1, 1, 0], dtype=np.int32)
        which = np.arange(n) % 4
        labels = parity[which]
        features = noise
        features[:, :2] += corners[which]
    else:  # rings
        labels = (np.arange(n) % c).astype(np.int32)
        radius = spec.separation * (labels + 1.0) + noise[:, 0]
        theta = 2.0 * np.pi * stream.uniform(n)
        features = np.empty((n, d))
        features[:, 0] = radius * np.cos(theta)
        features[:, 1] = radius * np.sin(theta)
        if d > 2:
            features[:, 2:] = noise[:, 2:]
    name = f"{spec.kind}-c{c}-d{d}-n{n}-s{spec.seed}"
    return LabeledDataset(features, labels, c, name)


def bayes_accuracy(spec: SynthSpec) -> float:
    """Accuracy of the Bayes-optimal classifier for ``spec``'s mixture.

    gaussian_mixture: with means a*e_c (a = separation/sqrt 2) and unit
    noise, correctness for the true class is P(a + z_c > max of the other
    C-1 standard normals) = E_u[Phi(u + a)^(C-1)], evaluated by
    Gauss-Hermite quadrature.

    xor: the optimal rule is the sign-quadrant rule; each of the two
    informative coordinates keeps its corner sign with p = Phi(separation/2)
    independently, and the parity is right iff 0 or 2 flips.

    rings: nearest-ring-radius rule with boundaries at midpoints; exact up
    to the negligible probability of a drawn radius folding through 0.
    """
    if spec.kind == "gaussian_mixture":
        a = spec.separation / np.sqrt(2.0)
        nodes, weights = roots_hermitenorm(160)
        vals = norm.cdf(nodes + a) ** (spec.num_classes - 1)
        return float(np.sum(weights * vals) / np.sqrt(2.0 * np.pi))
    if spec.kind == "xor":
        p = norm.cdf(spec.separation / 2.0)
        return float(p * p + (1.0 - p) * (1.0 - p))
    # rings: edge classes have a one-sided boundary
    c = spec.num_classes
    inside = 2.0 * norm.cdf(spec.separation / 2.0) - 1.0
    edge = norm.cdf(spec.separation / 2.0)
    return float((2 * edge + (c - 2) * inside) / c)


def few_shot_sample(ds: LabeledDataset, n_per_class: int, seed: int) -> LabeledDataset:
    """Draw exactly ``n_per_class`` rows per class, without replacement.

    Rows are emitted class by class; within a class the order follows a
    seeded permutation of that class's rows.
    """
    if n_per_class < 1:
        raise ValidationError("n_per_class must be >= 1")
    picked = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size < n_per_class:
            raise ValidationError(
                f"class {c} has {idx.size} examples, fewer than n_per_class={n_per_class}"
            )
        perm = rng.Stream(rng.derive(seed, 0x4653_484F, c)).permutation(idx.size)
        picked.append(idx[perm[:n_per_class]])
    rows = np.concatenate(picked)
    return LabeledDataset(
        ds.features[rows], ds.labels[rows], ds.num_classes, f"{ds.name}-few{n_per_class}"
    )


def make_stream(pool, sizes, seed: int) -> list[UnlabeledSlice]:
    """Cut a pool of unlabeled rows into disjoint stream slices.

    ``pool`` is a feature matrix or anything with a ``.features`` matrix.
    Slice t (1-based) gets ``sizes[t-1]`` rows of a seeded permutation of the
    pool, so the slices never overlap and never revisit a row.
    """
    features = getattr(pool, "features", pool)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValidationError("pool must be a 2-d matrix")
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ValidationError("sizes must be non-empty")
    if any(s < 1 for s in sizes):
        raise ValidationError("slice sizes must be >= 1")
    total, avail = sum(sizes), features.shape[0]
    if total > avail:
        raise CapacityError(
            f"slice sizes sum to {total} but the pool has {avail} rows "
            f"(short by {total - avail})"
        )
    source = getattr(pool, "source_id", None) or getattr(pool, "name", None) or "pool"
    perm = rng.Stream(rng.derive(seed, 0x534C_4943)).permutation(avail)
    slices, start = [], 0
    for t, size in enumerate(sizes, start=1):
        rows = perm[start : start + size]
        start += size
        slices.append(UnlabeledSlice(features[rows], t, f"{source}/slice{t}"))
    return slices


def fit_normalization(ds: LabeledDataset) -> NormalizationStats:
    """Per-feature mean/std of the labeled set (std floored at 1e-8)."""
    if ds.num_rows == 0:
        raise ValidationError("cannot fit normalization on an empty dataset")
    mean = ds.features.mean(axis=0)
    std = np.maximum(ds.features.std(axis=0), STD_FLOOR)
    return NormalizationStats(mean, std)


def apply_normalization(stats: NormalizationStats, features: np.ndarray) -> np.ndarray:
    """Elementwise (x - mean) / std; never reads anything but ``features``."""
    return (np.asarray(features, dtype=np.float64) - stats.mean) / stats.std


def normalize_dataset(stats: NormalizationStats, ds: LabeledDataset) -> LabeledDataset:
    return LabeledDataset(
        apply_normalization(stats, ds.features), ds.labels, ds.num_classes, ds.name
    )


def normalize_slice(stats: NormalizationStats, sl: UnlabeledSlice) -> UnlabeledSlice:
    return UnlabeledSlice(
        apply_normalization(stats, sl.features), sl.slice_index, sl.source_id
    )


# ---------------------------------------------------------------------------
# binary container


def save_dataset(path, ds) -> None:
    """Write a LabeledDataset or UnlabeledSlice to the binary container."""
    labeled = isinstance(ds, LabeledDataset)
    features = np.ascontiguousarray(ds.features, dtype=np.float64)
    n, d = features.shape
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(
            struct.pack(
                "<IIQQI",
                DATA_VERSION,
                1 if labeled else 0,
                n,
                d,
                ds.num_classes if labeled else 0,
            )
        )
        fh.write(features.tobytes())
        if labeled:
            fh.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedFileError(f"{what}: expected {count} bytes, got {len(buf)}")
    return buf


def load_dataset(path):
    """Read the container back; labeled files load as LabeledDataset,
    unlabeled ones as UnlabeledSlice (slice_index 1, source_id = path)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(DATA_MAGIC))
        if magic != DATA_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {DATA_MAGIC!r}")
        version, flags, n, d, c = struct.unpack(
            "<IIQQI", _read_exact(fh, 28, "dataset header")
        )
        if version != DATA_VERSION:
            raise FormatVersionError(f"dataset format version {version}, expected {DATA_VERSION}")
        features = np.frombuffer(
            _read_exact(fh, 8 * n * d, "feature payload"), dtype="<f8"
        ).reshape(n, d)
        if flags & 1:
            labels = np.frombuffer(_read_exact(fh, 4 * n, "label payload"), dtype="<i4")
            if labels.size and (labels.min() < 0 or labels.max() >= c):
                bad = int(np.argmax((labels < 0) | (labels >= c)))
                raise LabelRangeError(
                    f"label {int(labels[bad])} at row {bad} outside [0, {c})"
                )
            return LabeledDataset(features, labels, c, path.stem)
        return UnlabeledSlice(features, 1, str(path))


def load_csv(path):
    """Import ``f0,...,f{d-1}[,label]`` CSV; labeled if the label column is
    present (num_classes inferred as max label + 1)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TruncatedFileError(f"{path}: empty CSV") from None
        labeled = header and header[-1] == "label"
        d = len(header) - (1 if labeled else 0)
        expected = [f"f{i}" for i in range(d)] + (["label"] if labeled else [])
        if header != expected:
            raise ValidationError(f"{path}: CSV header {header} != expected {expected}")
        feats, labels = [], []
        for row in reader:
            if len(row) != len(header):
                raise ValidationError(f"{path}: row {reader.line_num} has {len(row)} fields")
            feats.append([float(v) for v in row[:d]])
            if labeled:
                labels.append(int(row[d]))
    features = np.asarray(feats, dtype=np.float64).reshape(len(feats), d)
    if labeled:
        y = np.asarray(labels, dtype=np.int32)
        if y.size == 0 or y.min() < 0:
            raise LabelRangeError(f"{path}: labels must be non-negative")
        return LabeledDataset(features, y, int(y.max()) + 1, path.stem)
    return UnlabeledSlice(features, 1, str(path))
