"""Synthetic long-tail datasets: count profiles, generation, batching and file I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

FORMAT_TAG = "longtail-v1"


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed.

    ``line`` is the 1-based line number of the offending record (0 for
    file-level problems such as an empty file).
    """

    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class LongTailProfile:
    num_classes: int
    max_count: int
    imbalance_factor: float


@dataclass(eq=False)
class Dataset:
    features: NDArray[np.float64]
    labels: NDArray[np.int64]
    class_counts: NDArray[np.int64]

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_counts = np.asarray(self.class_counts, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (N, D) with one label per row")
        L = self.class_counts.shape[0]
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= L):
            raise ValueError("label outside [0, L)")
        if not np.array_equal(np.bincount(self.labels, minlength=L), self.class_counts):
            raise ValueError("class_counts disagree with labels")
        if np.any(self.class_counts < 1):
            raise ValueError("every class needs at least one instance")

    @property
    def num_classes(self) -> int:
        return int(self.class_counts.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.class_counts, other.class_counts)
        )


@dataclass
class Batch:
    indices: NDArray[np.int64]
    labels: NDArray[np.int64]
    batch_class_counts: NDArray[np.int64]
    view_a: NDArray[np.float64]
    view_b: NDArray[np.float64]
    view_c: NDArray[np.float64]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_longtail_counts(profile: LongTailProfile) -> NDArray[np.int64]:
    """Per-class counts decaying geometrically from ``max_count``.

    Class ``k`` receives ``round(n_max * IF ** (-k / (L - 1)))`` instances,
    so the head class has ``n_max`` and the tail ``round(n_max / IF)``.
    """
    L, n_max, imb = profile.num_classes, profile.max_count, float(profile.imbalance_factor)
    if L < 2:
        raise ValueError(f"need at least 2 classes, got {L}")
    if n_max < 1:
        raise ValueError(f"max_count must be >= 1, got {n_max}")
    if not imb >= 1.0:
        raise ValueError(f"imbalance_factor must be >= 1, got {imb}")
    counts = np.array(
        [_round_half_up(n_max * imb ** (-k / (L - 1))) for k in range(L)], dtype=np.int64
    )
    if counts.min() < 1:
        raise ValueError(
            f"profile L={L}, n_max={n_max}, IF={imb} rounds the tail class to zero instances"
        )
    return counts


def class_centers(num_classes: int, input_dim: int, center_scale: float,
                  rng: np.random.Generator) -> NDArray[np.float64]:
    """Place class centers so the closest pair sits ``center_scale`` apart.

    With ``L <= D`` the centers are scaled orthonormal vectors (all pairwise
    distances equal). Otherwise they lie on a regular polygon inside a
    random 2-D plane, with adjacent vertices ``center_scale`` apart.
    """
    L, D = num_classes, input_dim
    basis, _ = np.linalg.qr(rng.standard_normal((D, D)))
    if L <= D:
        return center_scale / math.sqrt(2.0) * basis[:, :L].T.copy()
    radius = center_scale / (2.0 * math.sin(math.pi / L))
    phase = rng.uniform(0.0, 2.0 * math.pi)
    angles = phase + 2.0 * math.pi * np.arange(L) / L
    planar = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return planar @ basis[:, :2].T


def gen_gaussian_mixture(counts, input_dim: int, center_scale: float,
                         noise_sigma: float, seed: int,
                         centers: NDArray[np.float64] | None = None) -> Dataset:
    """Draw an isotropic Gaussian blob per class, rows in class-major order.

    ``centers`` overrides the seeded center layout; the harness uses it to
    draw validation and test sets around the training centers.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0 or np.any(counts < 1):
        raise ValueError("counts must be a non-empty vector of positive integers")
    if input_dim < 2:
        raise ValueError(f"input_dim must be >= 2, got {input_dim}")
    if not noise_sigma > 0:
        raise ValueError(f"noise_sigma must be positive, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = class_centers(counts.size, input_dim, center_scale, rng)
    elif centers.shape != (counts.size, input_dim):
        raise ValueError("centers must be (L, D)")
    blocks = [centers[k] + noise_sigma * rng.standard_normal((n, input_dim))
              for k, n in enumerate(counts)]
    labels = np.repeat(np.arange(counts.size, dtype=np.int64), counts)
    return Dataset(np.concatenate(blocks, axis=0), labels, counts.copy())


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator,
                 jitter_sigma: float = 0.0) -> Batch:
    """Uniform draw without replacement plus three views of the rows.

    ``view_a`` is the raw rows (classifier branch); ``view_b`` and ``view_c``
    carry independent Gaussian jitter and feed the contrastive branch.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    if batch_size > len(dataset):
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
    if jitter_sigma < 0:
        raise ValueError("jitter_sigma must be non-negative")
    idx = np.sort(rng.choice(len(dataset), size=batch_size, replace=False)).astype(np.int64)
    x = dataset.features[idx]
    labels = dataset.labels[idx]
    if jitter_sigma > 0:
        view_b = x + jitter_sigma * rng.standard_normal(x.shape)
        view_c = x + jitter_sigma * rng.standard_normal(x.shape)
    else:
        view_b, view_c = x.copy(), x.copy()
    return Batch(
        indices=idx,
        labels=labels,
        batch_class_counts=np.bincount(labels, minlength=dataset.num_classes).astype(np.int64),
        view_a=x.copy(),
        view_b=view_b,
        view_c=view_c,
    )


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    lines = [f"{FORMAT_TAG} L={dataset.num_classes} D={dataset.input_dim}"]
    for label, row in zip(dataset.labels, dataset.features):
        lines.append(" ".join([str(int(label))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 3 or parts[0] != FORMAT_TAG:
        raise DatasetFormatError(f"expected '{FORMAT_TAG} L=<int> D=<int>' header", 1)
    try:
        fields = dict(p.split("=", 1) for p in parts[1:])
        L, D = int(fields["L"]), int(fields["D"])
    except (ValueError, KeyError):
        raise DatasetFormatError("malformed L/D fields in header", 1) from None
    if L < 1 or D < 1:
        raise DatasetFormatError("L and D must be positive", 1)
    return L, D


def read_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError("empty dataset file")
    L, D = _parse_header(lines[0])
    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != D + 1:
            raise DatasetFormatError(f"expected {D + 1} fields, found {len(parts)}", lineno)
        try:
            label = int(parts[0])
            row = [float(v) for v in parts[1:]]
        except ValueError:
            raise DatasetFormatError("non-numeric field", lineno) from None
        if not 0 <= label < L:
            raise DatasetFormatError(f"label {label} outside [0, {L})", lineno)
        if not all(math.isfinite(v) for v in row):
            raise DatasetFormatError("non-finite feature value", lineno)
        labels.append(label)
        rows.append(row)
    if not labels:
        raise DatasetFormatError("dataset has no instances")
    counts = np.bincount(np.array(labels), minlength=L)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise DatasetFormatError(f"class {int(missing[0])} has no instances")
    return Dataset(np.array(rows, dtype=np.float64).reshape(-1, D), np.array(labels), counts)
