"""Confusion-matrix evaluation: per-class IoU, mIoU, and tail-subset mIoU."""

import numpy as np

from .datamodel import IGNORE_INDEX, ClassCatalog
from .errors import ContractError


class ConfusionMatrix:
    """K x K counts with ground truth on rows and predictions on columns.

    Matrices are mergeable by addition, so per-image accumulation can run in
    any order (or in parallel) and be summed afterwards.
    """

    def __init__(self, num_classes: int, counts=None):
        if num_classes < 1:
            raise ContractError("need at least one class")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ContractError("counts must be a nonnegative KxK matrix")
        self.counts = counts

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        """Add one prediction/ground-truth raster pair; 255 pixels are skipped."""
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
        keep = gt != IGNORE_INDEX
        p, g = pred[keep], gt[keep]
        if ((p < 0) | (p >= self.num_classes)).any():
            raise ContractError("prediction contains out-of-range classes")
        if ((g < 0) | (g >= self.num_classes)).any():
            raise ContractError("ground truth contains out-of-range classes")
        flat = np.bincount(
            g.astype(np.int64) * self.num_classes + p.astype(np.int64),
            minlength=self.num_classes**2,
        )
        self.counts += flat.reshape(self.num_classes, self.num_classes)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU; classes absent from both gt and pred get NaN."""
    diag = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    out = np.full(cm.num_classes, np.nan)
    present = union > 0
    out[present] = diag[present] / union[present]
    return out


def miou(cm: ConfusionMatrix, class_subset=None) -> float:
    """Mean IoU over a class subset, skipping zero-denominator classes."""
    ious = class_iou(cm)
    if class_subset is not None:
        subset = sorted(int(c) for c in class_subset)
        if any(c < 0 or c >= cm.num_classes for c in subset):
            raise ContractError(f"subset {subset} out of range")
        ious = ious[subset]
    valid = ~np.isnan(ious)
    if not valid.any():
        return float("nan")
    return float(ious[valid].mean())


def evaluate_dataset(predict_fn, dataset, catalog: ClassCatalog) -> dict:
    """Score a predictor over (Image, LabelMap) pairs.

    ``predict_fn`` maps an Image to an HxW integer raster. Returns the eval
    document emitted by the CLI: per-class IoU, mIoU, tail mIoU, class names,
    and the number of evaluated pixels.
    """
    cm = ConfusionMatrix(catalog.num_classes)
    for image, label in dataset:
        cm.accumulate(predict_fn(image), label.to_indices())
    ious = class_iou(cm)
    return {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in ious],
        "miou": miou(cm),
        "miou_tail": miou(cm, catalog.tail_set),
        "class_names": list(catalog.names),
        "num_pixels": cm.total,
    }
