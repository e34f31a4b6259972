"""Core raster types and elementwise label/mask primitives.

Conventions used throughout the package:

* images are H x W x 3 float64 rasters in [0, 1],
* label maps are H x W x K one-hot uint8 rasters where an all-zero pixel row
  means "unlabeled / ignore",
* integer label rasters use 255 as the ignore sentinel,
* binary masks are H x W uint8 rasters with values in {0, 1}.

All types are immutable after construction (their arrays are marked
read-only) and all operations are pure functions, so everything here is safe
to use concurrently.
"""

from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError
from scipy import ndimage

from .errors import ContractError, DatasetFormatError, InvalidLabelError

IGNORE_INDEX = 255

DOMAIN_TAGS = ("source", "target", "translated-source", "translated-target")

# 4-connectivity structuring element for connected-component labelling
_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClassCatalog:
    """Semantic class catalog with a head/tail split.

    ``tail_set`` must be a nonempty proper subset of the class indices; the
    derived ``head_vector`` is 1 exactly for the classes not in it.
    """

    names: tuple
    tail_set: frozenset

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        tail = frozenset(int(k) for k in self.tail_set)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "tail_set", tail)
        if len(names) < 2:
            raise ContractError("catalog needs at least two classes")
        if not tail or not tail < set(range(len(names))):
            raise ContractError(
                "tail_set must be a nonempty proper subset of class indices, "
                f"got {sorted(tail)} for K={len(names)}"
            )

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def head_set(self) -> frozenset:
        return frozenset(range(self.num_classes)) - self.tail_set

    def head_vector(self) -> np.ndarray:
        """K-vector with 1 for head classes and 0 for tail classes."""
        vec = np.ones(self.num_classes, dtype=np.uint8)
        vec[sorted(self.tail_set)] = 0
        return vec


@dataclass(frozen=True)
class Image:
    """H x W x 3 raster in [0, 1] tagged with its domain."""

    pixels: np.ndarray
    domain_tag: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ContractError(f"image must be HxWx3, got shape {px.shape}")
        h, w = px.shape[:2]
        if h < 8 or w < 8 or h % 2 or w % 2:
            raise ContractError(f"image sides must be even and >= 8, got {h}x{w}")
        if not np.isfinite(px).all():
            raise ContractError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ContractError("image values must lie in [0, 1]")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ContractError(f"unknown domain tag {self.domain_tag!r}")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class LabelMap:
    """H x W x K one-hot raster; an all-zero pixel row means unlabeled."""

    onehot: np.ndarray

    def __post_init__(self):
        oh = np.asarray(self.onehot)
        if oh.ndim != 3:
            raise ContractError(f"label map must be HxWxK, got shape {oh.shape}")
        if not np.isin(oh, (0, 1)).all():
            raise ContractError("one-hot entries must be 0 or 1")
        sums = oh.sum(axis=2)
        if sums.max(initial=0) > 1:
            raise ContractError("one-hot rows must sum to 0 or 1")
        object.__setattr__(self, "onehot", _frozen(oh.astype(np.uint8)))

    @property
    def shape(self):
        return self.onehot.shape[:2]

    @property
    def num_classes(self) -> int:
        return self.onehot.shape[2]

    def labeled(self) -> np.ndarray:
        """H x W bool array marking pixels that carry a class."""
        return self.onehot.any(axis=2)

    def to_indices(self) -> np.ndarray:
        """H x W int array with 255 on unlabeled pixels."""
        idx = self.onehot.argmax(axis=2).astype(np.int64)
        idx[~self.labeled()] = IGNORE_INDEX
        return idx


@dataclass(frozen=True)
class ProbabilityMap:
    """H x W x K per-pixel class distribution (sums to 1 within 1e-5)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ContractError(f"probability map must be HxWxK, got shape {p.shape}")
        if not np.isfinite(p).all():
            raise ContractError("probability map contains non-finite values")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ContractError("probabilities must lie in [0, 1]")
        if np.abs(p.sum(axis=2) - 1.0).max() > 1e-5:
            raise ContractError("per-pixel probabilities must sum to 1 within 1e-5")
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def shape(self):
        return self.probs.shape[:2]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]


@dataclass(frozen=True)
class BinaryMask:
    """H x W raster with values in {0, 1}."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ContractError(f"mask must be HxW, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ContractError("mask values must be 0 or 1")
        object.__setattr__(self, "mask", _frozen(m.astype(np.uint8)))

    @property
    def shape(self):
        return self.mask.shape


def onehot_encode(indices: np.ndarray, catalog: ClassCatalog) -> LabelMap:
    """One-hot encode an integer label raster; 255 maps to an all-zero row."""
    idx = np.asarray(indices)
    if idx.ndim != 2:
        raise ContractError(f"label raster must be HxW, got shape {idx.shape}")
    k = catalog.num_classes
    bad = (idx != IGNORE_INDEX) & ((idx < 0) | (idx >= k))
    if bad.any():
        offending = np.unique(idx[bad])
        raise InvalidLabelError(
            f"label raster contains invalid indices {offending.tolist()} for K={k}"
        )
    onehot = np.zeros(idx.shape + (k,), dtype=np.uint8)
    valid = idx != IGNORE_INDEX
    onehot[valid, idx[valid].astype(np.int64)] = 1
    return LabelMap(onehot)


def argmax_class(p: ProbabilityMap) -> np.ndarray:
    """Per-pixel index of the maximum probability; ties go to the lowest index."""
    return p.probs.argmax(axis=2).astype(np.int64)


def class_mask(y: LabelMap, classes) -> BinaryMask:
    """Mask of pixels labeled with any class in ``classes``."""
    classes = sorted(int(c) for c in classes)
    if any(c < 0 or c >= y.num_classes for c in classes):
        raise ContractError(f"classes {classes} out of range for K={y.num_classes}")
    if not classes:
        return BinaryMask(np.zeros(y.shape, dtype=np.uint8))
    return BinaryMask(y.onehot[:, :, classes].any(axis=2).astype(np.uint8))


def connected_component_count(mask: np.ndarray) -> int:
    """Number of 4-connected components of the nonzero region."""
    _, count = ndimage.label(np.asarray(mask) != 0, structure=_CONN4)
    return int(count)


def count_class_instances(y: LabelMap, classes) -> int:
    """Total 4-connected components, counted per class over ``classes``."""
    total = 0
    for c in classes:
        total += connected_component_count(y.onehot[:, :, int(c)])
    return total


# ---------------------------------------------------------------------------
# PNG serialization: labels as single-channel 8-bit, images as 24-bit RGB.


def save_label_png(indices: np.ndarray, path) -> None:
    idx = np.asarray(indices)
    if idx.min(initial=0) < 0 or idx.max(initial=0) > 255:
        raise ContractError("label indices must fit in uint8")
    PILImage.fromarray(idx.astype(np.uint8), mode="L").save(path)


def load_label_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except UnidentifiedImageError as exc:
        raise DatasetFormatError(f"cannot decode label PNG {path}: {exc}") from exc
    return arr.astype(np.int64)


def save_image_png(image: Image, path) -> None:
    u8 = np.clip(np.round(image.pixels * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(u8, mode="RGB").save(path)


def load_image_png(path, domain_tag: str) -> Image:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except UnidentifiedImageError as exc:
        raise DatasetFormatError(f"cannot decode image PNG {path}: {exc}") from exc
    return Image(arr.astype(np.float64) / 255.0, domain_tag)
