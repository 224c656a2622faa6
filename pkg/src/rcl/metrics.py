"""Classification accuracy summaries and embedding-space quality indices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray


class DegenerateClusteringError(ValueError):
    """The clustering index is unbounded or undefined for this input."""


def per_class_accuracy(predictions: ArrayLike, labels: ArrayLike, num_classes: int
                       ) -> NDArray[np.float64]:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have equal length")
    totals = np.bincount(labels, minlength=num_classes)[:num_classes]
    if np.any(totals == 0):
        missing = int(np.flatnonzero(totals == 0)[0])
        raise ValueError(f"class {missing} absent from labels; its accuracy is undefined")
    hits = np.bincount(labels[predictions == labels], minlength=num_classes)[:num_classes]
    return hits / totals


def arithmetic_mean_acc(per_class: ArrayLike) -> float:
    a = np.asarray(per_class, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty accuracy vector")
    return float(a.mean())


def harmonic_mean_acc(per_class: ArrayLike) -> float:
    """Harmonic mean of per-class accuracies; 0 if any class scores 0 (the limit)."""
    a = np.asarray(per_class, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty accuracy vector")
    if np.any(a == 0):
        return 0.0
    with np.errstate(over="ignore"):
        # subnormal accuracies overflow 1/a to inf, giving the correct limit 0
        return float(a.size / np.sum(1.0 / a))


def _centroids(x: NDArray[np.float64], labels: NDArray[np.int64]
               ) -> tuple[NDArray[np.int64], NDArray[np.float64], NDArray[np.int64]]:
    classes, inverse, sizes = np.unique(labels, return_inverse=True, return_counts=True)
    cents = np.zeros((classes.size, x.shape[1]))
    np.add.at(cents, inverse, x)
    cents /= sizes[:, None]
    return inverse, cents, sizes


def calinski_harabasz(embeddings: ArrayLike, labels: ArrayLike) -> float:
    """Between-class over within-class dispersion, each divided by its degrees of freedom."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    inverse, cents, sizes = _centroids(x, labels)
    k = cents.shape[0]
    if k < 2 or n <= k:
        raise ValueError(f"need n > k >= 2, got n={n}, k={k}")
    between = float(np.sum(sizes * np.sum((cents - x.mean(axis=0)) ** 2, axis=1)))
    within = float(np.sum((x - cents[inverse]) ** 2))
    if within == 0.0:
        raise DegenerateClusteringError("zero within-class dispersion: index is unbounded")
    return (between / (k - 1)) / (within / (n - k))


def davies_bouldin(embeddings: ArrayLike, labels: ArrayLike) -> float:
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    inverse, cents, _ = _centroids(x, labels)
    k = cents.shape[0]
    if k < 2:
        raise ValueError("need at least two classes")
    dist_to_own = np.linalg.norm(x - cents[inverse], axis=1)
    scatter = np.bincount(inverse, weights=dist_to_own) / np.bincount(inverse)
    sep = np.linalg.norm(cents[:, None, :] - cents[None, :, :], axis=2)
    off_diag = ~np.eye(k, dtype=bool)
    if np.any(sep[off_diag] == 0):
        raise DegenerateClusteringError("coincident class centroids")
    ratio = np.where(off_diag, (scatter[:, None] + scatter[None, :]) / np.where(off_diag, sep, 1.0),
                     -np.inf)
    return float(np.mean(ratio.max(axis=1)))


@dataclass
class MarginStats:
    """Cosine-similarity structure of unit embeddings.

    ``intra[y]`` is the mean similarity over distinct same-class pairs (NaN
    when class ``y`` has a single member), ``inter[y, j]`` the mean
    cross-class similarity, and ``margin[y] = intra[y] - max_j inter[y, j]``.
    """

    intra: NDArray[np.float64]
    inter: NDArray[np.float64]
    margin: NDArray[np.float64]


def margin_stats(embeddings: ArrayLike, labels: ArrayLike, num_classes: int | None = None
                 ) -> MarginStats:
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    norms = np.linalg.norm(z, axis=1)
    if np.max(np.abs(norms - 1.0)) > 1e-9:
        raise ValueError("margin_stats expects unit-normalized rows")
    L = int(labels.max()) + 1 if num_classes is None else num_classes
    onehot = np.eye(L)[labels]
    sizes = onehot.sum(axis=0)
    sim = z @ z.T
    block = onehot.T @ sim @ onehot
    pair_counts = np.outer(sizes, sizes)
    self_sum = np.bincount(labels, weights=np.diag(sim), minlength=L)
    intra_pairs = sizes * (sizes - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        intra = np.where(intra_pairs > 0, (np.diag(block) - self_sum) / intra_pairs, np.nan)
        inter = np.where(pair_counts > 0, block / pair_counts, np.nan)
    np.fill_diagonal(inter, np.nan)
    margin = np.full(L, np.nan)
    for y in range(L):
        row = np.delete(inter[y], y)
        row = row[~np.isnan(row)]
        if row.size and not np.isnan(intra[y]):
            margin[y] = intra[y] - row.max()
    return MarginStats(intra=intra, inter=inter, margin=margin)


@dataclass
class MetricsReport:
    per_class_accuracy: NDArray[np.float64]
    arithmetic_mean: float
    harmonic_mean: float
    harmonic_has_zero_class: bool
    chi: float
    dbi: float
    margin: MarginStats | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def to_records(self) -> list[tuple[str, str]]:
        """Flat ``(key, value)`` pairs; floats use ``repr`` so they round-trip."""
        rec: list[tuple[str, str]] = [
            ("num_classes", str(self.per_class_accuracy.size)),
            ("arithmetic_mean", repr(float(self.arithmetic_mean))),
            ("harmonic_mean", repr(float(self.harmonic_mean))),
            ("harmonic_has_zero_class", str(bool(self.harmonic_has_zero_class)).lower()),
            ("chi", repr(float(self.chi))),
            ("dbi", repr(float(self.dbi))),
        ]
        for y, a in enumerate(self.per_class_accuracy):
            rec.append((f"per_class_accuracy.{y}", repr(float(a))))
        if self.margin is not None:
            L = self.margin.intra.size
            for y in range(L):
                rec.append((f"margin.intra.{y}", repr(float(self.margin.intra[y]))))
            for y in range(L):
                for j in range(L):
                    if j != y:
                        rec.append((f"margin.inter.{y}.{j}", repr(float(self.margin.inter[y, j]))))
            for y in range(L):
                rec.append((f"margin.min.{y}", repr(float(self.margin.margin[y]))))
        for key in sorted(self.extra):
            rec.append((f"extra.{key}", repr(float(self.extra[key]))))
        return rec

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_records())

    @classmethod
    def from_text(cls, text: str) -> MetricsReport:
        kv: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            key, sep, value = line.partition(" = ")
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            kv[key.strip()] = value.strip()
        L = int(kv["num_classes"])
        acc = np.array([float(kv[f"per_class_accuracy.{y}"]) for y in range(L)])
        margin = None
        if "margin.intra.0" in kv:
            inter = np.full((L, L), np.nan)
            for y in range(L):
                for j in range(L):
                    if j != y:
                        inter[y, j] = float(kv[f"margin.inter.{y}.{j}"])
            margin = MarginStats(
                intra=np.array([float(kv[f"margin.intra.{y}"]) for y in range(L)]),
                inter=inter,
                margin=np.array([float(kv[f"margin.min.{y}"]) for y in range(L)]),
            )
        extra = {k[len("extra."):]: float(v) for k, v in kv.items() if k.startswith("extra.")}
        return cls(
            per_class_accuracy=acc,
            arithmetic_mean=float(kv["arithmetic_mean"]),
            harmonic_mean=float(kv["harmonic_mean"]),
            harmonic_has_zero_class=kv["harmonic_has_zero_class"] == "true",
            chi=float(kv["chi"]),
            dbi=float(kv["dbi"]),
            margin=margin,
            extra=extra,
        )


def _safe_index(fn, x, labels) -> float:
    try:
        return fn(x, labels)
    except DegenerateClusteringError:
        return math.nan


def evaluate_embeddings(predictions: ArrayLike, labels: ArrayLike, embeddings: ArrayLike,
                        num_classes: int) -> MetricsReport:
    """Assemble a full report; degenerate CHI/DBI are recorded as NaN."""
    acc = per_class_accuracy(predictions, labels, num_classes)
    labels = np.asarray(labels)
    return MetricsReport(
        per_class_accuracy=acc,
        arithmetic_mean=arithmetic_mean_acc(acc),
        harmonic_mean=harmonic_mean_acc(acc),
        harmonic_has_zero_class=bool(np.any(acc == 0)),
        chi=_safe_index(calinski_harabasz, embeddings, labels),
        dbi=_safe_index(davies_bouldin, embeddings, labels),
        margin=margin_stats(embeddings, labels, num_classes),
    )
