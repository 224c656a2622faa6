from .config import CLASSIFIER_VARIANTS, LossConfig, LossVariant, total_loss
from .contrastive import (
    CompressionMap,
    EmbeddingBatch,
    Prototypes,
    bcl_loss,
    bcl_rcl_loss,
    compress_features,
    contrastive_engine,
    margin_coefficients,
    rcl_loss,
    rcl_pairwise_margin_form,
    scl_loss,
)
from .softmax import (
    as_real,
    balanced_softmax_loss,
    balanced_softmax_shift,
    ce_loss,
    log_sum_exp,
    logit_adjusted_loss,
    logit_adjustment_shift,
    softmax_xent_rows,
)

__all__ = [
    "CLASSIFIER_VARIANTS", "as_real", "CompressionMap", "EmbeddingBatch", "LossConfig", "LossVariant",
    "Prototypes", "balanced_softmax_loss", "balanced_softmax_shift", "bcl_loss", "bcl_rcl_loss",
    "ce_loss", "compress_features", "contrastive_engine", "log_sum_exp", "logit_adjusted_loss",
    "logit_adjustment_shift", "margin_coefficients", "rcl_loss", "rcl_pairwise_margin_form",
    "scl_loss", "softmax_xent_rows", "total_loss",
]
