"""Loss selection and weighting for the two-branch objective."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray


class LossVariant(str, enum.Enum):
    CE = "CE"
    BALANCED_SOFTMAX = "BALANCED_SOFTMAX"
    LOGIT_ADJUSTED = "LOGIT_ADJUSTED"
    SCL = "SCL"
    BCL = "BCL"
    RCL = "RCL"
    BCL_RCL = "BCL_RCL"

    @property
    def is_classifier(self) -> bool:
        return self in CLASSIFIER_VARIANTS

    @property
    def uses_prototypes(self) -> bool:
        return self in (LossVariant.BCL, LossVariant.BCL_RCL)

    @property
    def rebalanced(self) -> bool:
        return self in (LossVariant.RCL, LossVariant.BCL_RCL)


CLASSIFIER_VARIANTS = frozenset(
    {LossVariant.CE, LossVariant.BALANCED_SOFTMAX, LossVariant.LOGIT_ADJUSTED})


@dataclass
class LossConfig:
    """Which classifier/contrastive losses to combine, and their knobs.

    ``priors`` defaults to the training class frequencies when left as
    ``None``; the trainer fills it in from the dataset.
    """

    classifier: LossVariant = LossVariant.LOGIT_ADJUSTED
    contrastive: LossVariant | None = None
    tau_logit: float = 1.0
    priors: NDArray[np.float64] | None = None
    temperature: float = 0.1
    alpha: float = 2.0
    beta: float = 1.0
    strict_paper: bool = False

    def __post_init__(self) -> None:
        self.classifier = LossVariant(self.classifier)
        if not self.classifier.is_classifier:
            raise ValueError(f"{self.classifier.value} is not a classifier loss")
        if self.contrastive is not None:
            self.contrastive = LossVariant(self.contrastive)
            if self.contrastive.is_classifier:
                raise ValueError(f"{self.contrastive.value} is not a contrastive loss")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.tau_logit < 0:
            raise ValueError("tau_logit must be non-negative")
        if self.priors is not None:
            self.priors = np.asarray(self.priors, dtype=np.float64)
            if np.any(self.priors <= 0) or abs(self.priors.sum() - 1.0) > 1e-9:
                raise ValueError("priors must be positive and sum to 1")


def total_loss(classifier_loss: float, contrastive_loss: float, config: LossConfig) -> float:
    return config.alpha * classifier_loss + config.beta * contrastive_loss
