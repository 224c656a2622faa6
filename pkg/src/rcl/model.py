"""Two-branch MLP: shared encoder, linear classifier, projection head and prototypes.

Dense layers compute ``x @ W.T + b``. Encoder layers and all but the last
projector layer use ``tanh``; the projector output is L2-normalized to give
the contrastive embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .data import Batch
from .losses import (
    CompressionMap,
    EmbeddingBatch,
    LossConfig,
    LossVariant,
    as_real,
    balanced_softmax_shift,
    contrastive_engine,
    logit_adjustment_shift,
    rcl_loss,
    scl_loss,
    softmax_xent_rows,
    total_loss,
)

Array = NDArray[np.float64]
NORM_EPS = 1e-12


@dataclass
class ModelParams:
    encoder: list[tuple[Array, Array]]
    classifier_w: Array
    classifier_b: Array
    projector: list[tuple[Array, Array]]
    prototypes: Array

    @property
    def input_dim(self) -> int:
        return self.encoder[0][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier_w.shape[0]

    def named(self) -> list[tuple[str, Array]]:
        """Every parameter tensor in a fixed order, keyed by a stable name."""
        out = []
        for i, (w, b) in enumerate(self.encoder):
            out += [(f"encoder.{i}.w", w), (f"encoder.{i}.b", b)]
        out += [("classifier.w", self.classifier_w), ("classifier.b", self.classifier_b)]
        for i, (w, b) in enumerate(self.projector):
            out += [(f"projector.{i}.w", w), (f"projector.{i}.b", b)]
        out.append(("prototypes", self.prototypes))
        return out

    @classmethod
    def from_named(cls, tensors: dict[str, Array]) -> ModelParams:
        def layers(prefix: str) -> list[tuple[Array, Array]]:
            out, i = [], 0
            while f"{prefix}.{i}.w" in tensors:
                out.append((tensors[f"{prefix}.{i}.w"], tensors[f"{prefix}.{i}.b"]))
                i += 1
            return out

        return cls(
            encoder=layers("encoder"),
            classifier_w=tensors["classifier.w"],
            classifier_b=tensors["classifier.b"],
            projector=layers("projector"),
            prototypes=tensors["prototypes"],
        )

    def copy(self) -> ModelParams:
        return ModelParams.from_named({k: v.copy() for k, v in self.named()})

    def zeros_like(self) -> ModelParams:
        return ModelParams.from_named({k: np.zeros_like(v) for k, v in self.named()})


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Array, Array]:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)


def init_params(input_dim: int, num_classes: int, rng: np.random.Generator, *,
                hidden_dim: int = 64, feat_dim: int = 32, embed_dim: int = 16,
                projector_hidden: tuple[int, ...] = ()) -> ModelParams:
    """Uniform fan-in weights, zero biases, random unit prototypes."""
    encoder = [_dense(rng, input_dim, hidden_dim), _dense(rng, hidden_dim, feat_dim)]
    cls_w, cls_b = _dense(rng, feat_dim, num_classes)
    widths = (feat_dim, *projector_hidden, embed_dim)
    projector = [_dense(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
    protos = rng.standard_normal((num_classes, embed_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return ModelParams(encoder, cls_w, cls_b, projector, protos)


@dataclass
class _Trace:
    inputs: list[Array] = field(default_factory=list)
    outputs: list[Array] = field(default_factory=list)


def _encode(params: ModelParams, x: Array, trace: _Trace | None = None) -> Array:
    h = x
    for w, b in params.encoder:
        if trace is not None:
            trace.inputs.append(h)
        h = np.tanh(h @ w.T + b)
        if trace is not None:
            trace.outputs.append(h)
    return h


def _project(params: ModelParams, feat: Array, trace: _Trace | None = None
             ) -> tuple[Array, Array]:
    h = feat
    last = len(params.projector) - 1
    for i, (w, b) in enumerate(params.projector):
        if trace is not None:
            trace.inputs.append(h)
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
        if trace is not None:
            trace.outputs.append(h)
    # clamp so an all-zero projection maps to the zero vector instead of NaN
    norm = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), NORM_EPS)
    return h / norm, norm


def forward(params: ModelParams, inputs: Array) -> tuple[Array, Array, Array]:
    """Return ``(logits, contrastive embeddings, feature-layer activations)``."""
    inputs = as_real(inputs)
    if inputs.ndim != 2 or inputs.shape[1] != params.input_dim:
        raise ValueError(f"expected inputs with {params.input_dim} columns, got {inputs.shape}")
    feat = _encode(params, inputs)
    logits = feat @ params.classifier_w.T + params.classifier_b
    z, _ = _project(params, feat)
    return logits, z, feat


def predict(params: ModelParams, inputs: Array) -> NDArray[np.int64]:
    logits, _, _ = forward(params, inputs)
    return np.argmax(logits, axis=1)


def _encoder_backward(params: ModelParams, trace: _Trace, g_feat: Array, grads: ModelParams
                      ) -> None:
    g = g_feat
    for i in reversed(range(len(params.encoder))):
        w, _ = params.encoder[i]
        g = g * (1.0 - trace.outputs[i] ** 2)
        gw, gb = grads.encoder[i]
        gw += g.T @ trace.inputs[i]
        gb += g.sum(axis=0)
        g = g @ w


def _projector_backward(params: ModelParams, trace: _Trace, g_out: Array, grads: ModelParams
                        ) -> Array:
    g = g_out
    last = len(params.projector) - 1
    for i in reversed(range(len(params.projector))):
        w, _ = params.projector[i]
        if i < last:
            g = g * (1.0 - trace.outputs[i] ** 2)
        gw, gb = grads.projector[i]
        gw += g.T @ trace.inputs[i]
        gb += g.sum(axis=0)
        g = g @ w
    return g


@dataclass
class LossParts:
    total: float
    classifier: float
    contrastive: float


def classifier_shift(config: LossConfig, counts: NDArray[np.int64]) -> Array | None:
    if config.classifier is LossVariant.CE:
        return None
    if config.classifier is LossVariant.BALANCED_SOFTMAX:
        return balanced_softmax_shift(counts)
    priors = config.priors if config.priors is not None else counts / counts.sum()
    return logit_adjustment_shift(priors, config.tau_logit)


def contrastive_loss(variant: LossVariant, batch: EmbeddingBatch, prototypes: Array,
                     counts: NDArray[np.int64], config: LossConfig,
                     compression: CompressionMap | None = None
                     ) -> tuple[float, Array, Array | None]:
    """Dispatch to the selected contrastive loss; compression only affects
    the rebalanced variants."""
    t, strict = config.temperature, config.strict_paper
    if variant is LossVariant.SCL:
        loss, gz = scl_loss(batch, t, strict_paper=strict)
        return loss, gz, None
    if variant is LossVariant.RCL:
        loss, gz = rcl_loss(batch, counts, t, compression=compression, strict_paper=strict)
        return loss, gz, None
    if variant.uses_prototypes:
        # engine called directly: the trainer keeps prototypes on the unit
        # sphere, but gradient checks perturb them off it
        return contrastive_engine(
            batch.embeddings, batch.labels, prototypes.shape[0], temperature=t,
            prototypes=prototypes, class_average=True,
            counts=counts if variant.rebalanced else None,
            factors=compression.factors if (variant.rebalanced and compression) else None,
            strict_paper=strict)
    raise ValueError(f"{variant} is not a contrastive loss")


def backward(params: ModelParams, batch: Batch, config: LossConfig,
             class_counts: NDArray[np.int64],
             compression: CompressionMap | None = None) -> tuple[ModelParams, LossParts]:
    """Gradients of ``alpha * classifier + beta * contrastive`` for every tensor.

    ``view_a`` feeds the classifier loss (mean over rows); ``view_b`` and
    ``view_c`` are stacked into one contrastive batch of ``2B`` rows.
    """
    grads = params.zeros_like()
    counts = np.asarray(class_counts, dtype=np.int64)

    trace_a = _Trace()
    feat_a = _encode(params, batch.view_a, trace_a)
    logits = feat_a @ params.classifier_w.T + params.classifier_b
    rows_loss, g_logits = softmax_xent_rows(logits, batch.labels, classifier_shift(config, counts))
    cls_loss = rows_loss.mean()
    g_logits *= config.alpha / logits.shape[0]
    grads.classifier_w += g_logits.T @ feat_a
    grads.classifier_b += g_logits.sum(axis=0)
    _encoder_backward(params, trace_a, g_logits @ params.classifier_w, grads)

    con_loss = logits.dtype.type(0.0)
    if config.contrastive is not None and config.beta != 0:
        views = np.concatenate([batch.view_b, batch.view_c], axis=0)
        labels = np.concatenate([batch.labels, batch.labels])
        trace_e, trace_p = _Trace(), _Trace()
        feat = _encode(params, views, trace_e)
        z, norm = _project(params, feat, trace_p)
        con_loss, gz, gp = contrastive_loss(config.contrastive, EmbeddingBatch(z, labels),
                                            params.prototypes, counts, config, compression)
        gz = config.beta * gz
        g_raw = (gz - z * np.sum(z * gz, axis=1, keepdims=True)) / norm
        g_feat = _projector_backward(params, trace_p, g_raw, grads)
        _encoder_backward(params, trace_e, g_feat, grads)
        if gp is not None:
            grads.prototypes += config.beta * gp

    parts = LossParts(total_loss(cls_loss, con_loss, config), cls_loss, con_loss)
    return grads, parts


def sgd_step(params: ModelParams, grads: ModelParams, velocity: ModelParams, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0
             ) -> tuple[ModelParams, ModelParams]:
    """Heavy-ball SGD: ``v = m v + g + wd p``, ``p = p - lr v``; prototypes renormalized."""
    new_p, new_v = {}, {}
    for (name, p), (_, g), (_, v) in zip(params.named(), grads.named(), velocity.named()):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch for {name}")
        v_next = momentum * v + g + weight_decay * p
        new_v[name] = v_next
        new_p[name] = p - lr * v_next
    protos = new_p["prototypes"]
    new_p["prototypes"] = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    return ModelParams.from_named(new_p), ModelParams.from_named(new_v)
