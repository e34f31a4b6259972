"""Pseudo-label generation by per-map maximum-probability thresholding.

For every probability map the class-wise threshold is recomputed: among the
pixels a class wins by argmax, its threshold is the median winning confidence
(descending sort, index floor(N/2)), capped at 0.9. A pixel keeps its argmax
class only when its confidence is strictly above the class threshold;
otherwise it stays unlabeled.
"""

from dataclasses import dataclass

import numpy as np

from .datamodel import LabelMap, ProbabilityMap, argmax_class
from .errors import ContractError

THRESHOLD_CAP = 0.9


@dataclass(frozen=True)
class ThresholdVector:
    """Per-class confidence thresholds in [0, 0.9]."""

    thresholds: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        if t.ndim != 1:
            raise ContractError("thresholds must be a K-vector")
        if not np.isfinite(t).all() or t.min() < 0.0 or t.max() > THRESHOLD_CAP:
            raise ContractError(f"thresholds must lie in [0, {THRESHOLD_CAP}]")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "thresholds", t)


def compute_thresholds(p: ProbabilityMap) -> ThresholdVector:
    """Per-class median winning confidence, capped at 0.9.

    Classes that win no pixel get the cap value.
    """
    winners = argmax_class(p)
    confidence = np.take_along_axis(p.probs, winners[:, :, None], axis=2)[:, :, 0]
    thresholds = np.full(p.num_classes, THRESHOLD_CAP)
    for k in range(p.num_classes):
        conf_k = confidence[winners == k]
        if conf_k.size == 0:
            continue
        order = np.sort(conf_k)[::-1]
        thresholds[k] = min(order[conf_k.size // 2], THRESHOLD_CAP)
    return ThresholdVector(thresholds)


def label_with_thresholds(p: ProbabilityMap, thresholds: ThresholdVector) -> LabelMap:
    """Keep each pixel's argmax class iff confidence strictly exceeds its threshold."""
    t = thresholds.thresholds
    if t.shape[0] != p.num_classes:
        raise ContractError(
            f"threshold vector has {t.shape[0]} entries for K={p.num_classes}"
        )
    winners = argmax_class(p)
    confidence = np.take_along_axis(p.probs, winners[:, :, None], axis=2)[:, :, 0]
    accept = confidence > t[winners]
    onehot = np.zeros(p.probs.shape, dtype=np.uint8)
    hh, ww = np.nonzero(accept)
    onehot[hh, ww, winners[hh, ww]] = 1
    return LabelMap(onehot)


def generate_pseudo_label(p: ProbabilityMap) -> LabelMap:
    """Maximum-probability-threshold pseudo label for one probability map."""
    return label_with_thresholds(p, compute_thresholds(p))
