"""Supervised contrastive losses (SCL, BCL, RCL, BCL+RCL) with hand-derived gradients.

All variants share one engine. For an anchor ``i`` of class ``y`` the loss is

    loss_i = c_i * sum_p [ log D_i - s_ip - log w_y ]

where ``s_ik = z_i . z_k / t``, the positives ``p`` are the other members of
class ``y`` (batch rows plus the class prototype when prototypes are used),
``w_j`` is the class weight (training count ``n_j`` for the rebalanced
variants, 1 otherwise) and

    D_i = sum_j w_j * a_ij * sum_{k in class j, k != i} exp(s_ik)

with ``a_ij`` the class-averaging factor (``1 / #members of class j other
than i``) for the balanced variants and 1 otherwise. ``c_i`` is
``1 / #positives`` by default or ``1 / |B_y|`` in strict mode. The batch
loss is the mean over anchors that have at least one positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .softmax import as_real

NORM_TOL = 1e-9


def _check_unit_rows(x: NDArray[np.float64], what: str) -> None:
    norms = np.linalg.norm(x, axis=1)
    if x.size and np.max(np.abs(norms - 1.0)) > NORM_TOL:
        raise ValueError(f"{what} rows must be unit-normalized (tolerance {NORM_TOL})")


@dataclass(eq=False)
class EmbeddingBatch:
    embeddings: NDArray[np.float64]
    labels: NDArray[np.int64]
    unit_normalized: bool = True

    def __post_init__(self) -> None:
        self.embeddings = as_real(self.embeddings)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != self.labels.shape[0]:
            raise ValueError("embeddings must be (n, K) with one label per row")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")
        if self.unit_normalized:
            _check_unit_rows(self.embeddings, "embedding")

    @classmethod
    def normalized(cls, raw: ArrayLike, labels: ArrayLike) -> EmbeddingBatch:
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw / np.linalg.norm(raw, axis=1, keepdims=True), labels)


@dataclass(eq=False)
class Prototypes:
    centers: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.centers = as_real(self.centers)
        if self.centers.ndim != 2:
            raise ValueError("prototype centers must be an (L, K) matrix")
        _check_unit_rows(self.centers, "prototype")


@dataclass(eq=False)
class CompressionMap:
    factors: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.factors = np.asarray(self.factors, dtype=np.float64)
        if self.factors.ndim != 1 or np.any(~(self.factors > 0)):
            raise ValueError("compression factors must be a vector of positive reals")

    @classmethod
    def identity(cls, num_classes: int) -> CompressionMap:
        return cls(np.ones(num_classes))


def compress_features(batch: EmbeddingBatch, cmap: CompressionMap) -> EmbeddingBatch:
    """Scale each row by its class factor. Rows are not renormalized."""
    if batch.labels.size and batch.labels.max() >= cmap.factors.size:
        raise ValueError("label without a compression factor")
    scaled = batch.embeddings * cmap.factors[batch.labels][:, None]
    return EmbeddingBatch(scaled, batch.labels.copy(), unit_normalized=False)


def _require_normalized(batch: EmbeddingBatch) -> None:
    if not batch.unit_normalized:
        raise ValueError("contrastive losses take unit-normalized batches; "
                         "pass compression through the loss instead")


def _class_log_weights(counts: ArrayLike | None, num_classes: int) -> NDArray[np.float64]:
    if counts is None:
        return np.zeros(num_classes)
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (num_classes,):
        raise ValueError(f"expected {num_classes} class counts, got shape {counts.shape}")
    if np.any(counts <= 0):
        raise ValueError("class counts must be positive")
    return np.log(counts)


def contrastive_engine(z: NDArray[np.float64], labels: NDArray[np.int64], num_classes: int, *,
                       temperature: float,
                       prototypes: NDArray[np.float64] | None = None,
                       counts: ArrayLike | None = None,
                       class_average: bool = False,
                       factors: NDArray[np.float64] | None = None,
                       strict_paper: bool = False,
                       ) -> tuple[float, NDArray[np.float64], NDArray[np.float64] | None]:
    """Loss and gradients w.r.t. the raw embeddings (and prototypes, if any)."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    n = z.shape[0]
    if labels.size and labels.max() >= num_classes:
        raise ValueError("label outside [0, L)")
    log_w = _class_log_weights(counts, num_classes)

    if factors is not None:
        factors = np.asarray(factors, dtype=np.float64)
        zt = z * factors[labels][:, None]
        pt = None if prototypes is None else prototypes * factors[:, None]
    else:
        zt, pt = z, prototypes

    if pt is None:
        members, member_labels = zt, labels
    else:
        members = np.concatenate([zt, pt], axis=0)
        member_labels = np.concatenate([labels, np.arange(num_classes)])

    sim = zt @ members.T / temperature
    rows = np.arange(n)
    member_onehot = np.eye(num_classes, dtype=sim.dtype)[member_labels]
    same_count = member_onehot.sum(axis=0)
    # positives: same-class members other than the anchor itself
    n_pos = same_count[labels] - 1
    active = n_pos > 0
    n_active = int(active.sum())

    grad_z = np.zeros_like(z)
    grad_p = None if prototypes is None else np.zeros_like(prototypes)
    if n_active == 0:
        return z.dtype.type(0.0), grad_z, grad_p

    # log weight of a class-j member in the denominator of a class-y anchor
    table = np.broadcast_to(log_w, (num_classes, num_classes)).copy()
    if class_average:
        avail = np.broadcast_to(same_count, (num_classes, num_classes)) - np.eye(num_classes)
        table -= np.log(np.maximum(avail, 1))
    logits = sim + table[labels][:, member_labels]
    logits[rows, rows] = -np.inf
    row_max = logits.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    expd = np.exp(logits - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    denom = np.where(denom > 0, denom, 1.0)
    log_d = (row_max + np.log(denom))[:, 0]
    soft = expd / denom

    if strict_paper:
        batch_count = np.bincount(labels, minlength=num_classes)
        scale = 1.0 / batch_count[labels]
    else:
        scale = 1.0 / np.maximum(n_pos, 1)
    scale = np.where(active, scale, 0.0)

    class_sim = sim @ member_onehot
    pos_sim = class_sim[rows, labels] - sim[rows, rows]
    per_anchor_loss = scale * (n_pos * (log_d - log_w[labels]) - pos_sim)
    loss = per_anchor_loss.sum() / n_active

    # d loss / d sim
    coef = scale / (n_active * temperature)
    g = (coef * n_pos)[:, None] * soft
    g -= coef[:, None] * (labels[:, None] == member_labels[None, :])
    g[rows, rows] += coef
    grad_zt = g @ members
    grad_zt += g[:, :n].T @ zt
    if factors is not None:
        grad_z = grad_zt * factors[labels][:, None]
    else:
        grad_z = grad_zt
    if prototypes is not None:
        grad_pt = g[:, n:].T @ zt
        grad_p = grad_pt * factors[:, None] if factors is not None else grad_pt
    return loss, grad_z, grad_p


def _num_classes(batch: EmbeddingBatch, floor: int = 0) -> int:
    return max(floor, int(batch.labels.max()) + 1 if batch.labels.size else 0)


def scl_loss(batch: EmbeddingBatch, temperature: float = 0.1, *, strict_paper: bool = False
             ) -> tuple[float, NDArray[np.float64]]:
    """Supervised contrastive loss; anchors with no same-class partner are skipped."""
    _require_normalized(batch)
    loss, gz, _ = contrastive_engine(batch.embeddings, batch.labels, _num_classes(batch),
                                     temperature=temperature, strict_paper=strict_paper)
    return loss, gz


def rcl_loss(batch: EmbeddingBatch, counts: ArrayLike, temperature: float = 0.1, *,
             compression: CompressionMap | None = None, strict_paper: bool = False
             ) -> tuple[float, NDArray[np.float64]]:
    """Rebalanced contrastive loss.

    The positive term carries the anchor's training count ``n_y`` and every
    denominator member of class ``j`` carries ``n_j``; with equal counts the
    weights cancel and this is exactly ``scl_loss``.
    """
    _require_normalized(batch)
    counts = np.asarray(counts)
    L = _num_classes(batch, counts.shape[0])
    loss, gz, _ = contrastive_engine(
        batch.embeddings, batch.labels, L, temperature=temperature, counts=counts,
        factors=None if compression is None else compression.factors,
        strict_paper=strict_paper)
    return loss, gz


def bcl_loss(batch: EmbeddingBatch, prototypes: Prototypes, temperature: float = 0.1, *,
             strict_paper: bool = False
             ) -> tuple[float, NDArray[np.float64], NDArray[np.float64]]:
    """Balanced contrastive loss with class averaging and one prototype per class.

    Returns the loss and gradients w.r.t. the embeddings and the prototypes.
    """
    _require_normalized(batch)
    L = prototypes.centers.shape[0]
    if batch.labels.size and batch.labels.max() >= L:
        raise ValueError(f"prototype count {L} does not cover the batch labels")
    loss, gz, gp = contrastive_engine(batch.embeddings, batch.labels, L,
                                      temperature=temperature, prototypes=prototypes.centers,
                                      class_average=True, strict_paper=strict_paper)
    return loss, gz, gp


def bcl_rcl_loss(batch: EmbeddingBatch, prototypes: Prototypes, counts: ArrayLike,
                 compression: CompressionMap | None = None, temperature: float = 0.1, *,
                 strict_paper: bool = False
                 ) -> tuple[float, NDArray[np.float64], NDArray[np.float64]]:
    """BCL with count-rebalanced numerator/denominator on compressed features.

    Prototypes are compressed with their own class factor, like instances.
    """
    _require_normalized(batch)
    L = prototypes.centers.shape[0]
    if batch.labels.size and batch.labels.max() >= L:
        raise ValueError(f"prototype count {L} does not cover the batch labels")
    if compression is not None and compression.factors.shape != (L,):
        raise ValueError("compression map must hold one factor per class")
    loss, gz, gp = contrastive_engine(
        batch.embeddings, batch.labels, L, temperature=temperature,
        prototypes=prototypes.centers, counts=counts, class_average=True,
        factors=None if compression is None else compression.factors,
        strict_paper=strict_paper)
    return loss, gz, gp


def margin_coefficients(counts: ArrayLike) -> NDArray[np.float64]:
    """Matrix ``M[y, j] = n_j / n_y``: the factor multiplying a class-``j``
    competitor of a class-``y`` anchor, i.e. ``exp`` of the pairwise margin
    ``log(n_j / n_y)``."""
    counts = np.asarray(counts, dtype=np.float64)
    return counts[None, :] / counts[:, None]


def rcl_pairwise_margin_form(batch: EmbeddingBatch, counts: ArrayLike,
                             temperature: float = 0.1, *,
                             compression: CompressionMap | None = None,
                             strict_paper: bool = False) -> float:
    """RCL evaluated in its pairwise-margin shape, anchor by anchor.

    Each positive ``p`` of anchor ``i`` contributes
    ``log(1 + sum_{k != i, p} (n_k / n_y) exp(s_ik - s_ip))``. This is an
    independent evaluation path used to cross-check ``rcl_loss``.
    """
    _require_normalized(batch)
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("class counts must be positive")
    z, labels = batch.embeddings, batch.labels
    if compression is not None:
        z = z * compression.factors[labels][:, None]
    log_margin = np.log(margin_coefficients(counts))
    n = z.shape[0]
    anchor_losses = []
    for i in range(n):
        y = labels[i]
        others = np.array([k for k in range(n) if k != i], dtype=np.int64)
        positives = others[labels[others] == y]
        if positives.size == 0:
            continue
        sims = z[others] @ z[i] / temperature
        margins = log_margin[y, labels[others]]
        terms = []
        for p in positives:
            p_pos = int(np.searchsorted(others, p))
            competitors = np.delete(margins + sims - sims[p_pos], p_pos)
            terms.append(np.logaddexp.reduce(np.concatenate([[0.0], competitors])))
        norm = int(np.sum(labels == y)) if strict_paper else positives.size
        anchor_losses.append(float(np.sum(terms)) / norm)
    if not anchor_losses:
        return 0.0
    return float(np.mean(anchor_losses))
