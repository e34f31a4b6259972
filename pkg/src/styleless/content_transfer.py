"""Tail-class content transfer between a translated source image and a target image.

The transfer region is the intersection of the source tail-class mask and the
target head-class mask; inside it the input-level transfer copies translated
source pixels and the output-level transfer copies the exact source labels
into the pseudo label. Carrier tail classes participate only when a required
companion class co-occurs in the source label, and the whole transfer is
gated by the per-image tail instance count against the dataset median.
"""

from dataclasses import dataclass

import numpy as np

from .datamodel import (
    BinaryMask,
    ClassCatalog,
    Image,
    LabelMap,
    class_mask,
    count_class_instances,
)
from .errors import ContractError


@dataclass(frozen=True)
class TransferPolicy:
    """Tail set, carrier co-occurrence rules, and the instance-count gate."""

    tail_set: frozenset
    cooccurrence_rules: tuple = ()
    min_tail_instances: int = 0

    def __post_init__(self):
        tail = frozenset(int(k) for k in self.tail_set)
        rules = tuple(
            (int(carrier), frozenset(int(c) for c in companions))
            for carrier, companions in self.cooccurrence_rules
        )
        object.__setattr__(self, "tail_set", tail)
        object.__setattr__(self, "cooccurrence_rules", rules)
        if not tail:
            raise ContractError("tail_set must be nonempty")
        for carrier, companions in rules:
            if carrier not in tail:
                raise ContractError(f"carrier class {carrier} is not a tail class")
            if not companions:
                raise ContractError(f"carrier class {carrier} has no companions")
        if self.min_tail_instances < 0:
            raise ContractError("min_tail_instances must be >= 0")


def apply_cooccurrence(y_s: LabelMap, policy: TransferPolicy) -> frozenset:
    """Effective tail set for one source label map.

    Only classes present in the image participate; a carrier class is dropped
    unless at least one of its companion classes is present too.
    """
    present = {
        k for k in policy.tail_set if k < y_s.num_classes and y_s.onehot[:, :, k].any()
    }
    carriers = dict(policy.cooccurrence_rules)
    effective = set()
    for k in present:
        if k in carriers:
            if any(
                c < y_s.num_classes and y_s.onehot[:, :, c].any()
                for c in carriers[k]
            ):
                effective.add(k)
        else:
            effective.add(k)
    return frozenset(effective)


def tail_label(y_s: LabelMap, policy: TransferPolicy) -> LabelMap:
    """Source label restricted to the effective tail classes."""
    effective = apply_cooccurrence(y_s, policy)
    onehot = np.zeros_like(y_s.onehot)
    for k in effective:
        onehot[:, :, k] = y_s.onehot[:, :, k]
    return LabelMap(onehot)


def gate_transfer(y_s: LabelMap, policy: TransferPolicy) -> bool:
    """True iff the effective tail instance count strictly exceeds the median."""
    effective = apply_cooccurrence(y_s, policy)
    return count_class_instances(y_s, effective) > policy.min_tail_instances


def head_mask(y_t: LabelMap, catalog: ClassCatalog) -> BinaryMask:
    """Per-pixel inner product of the one-hot row with the head-class vector."""
    if y_t.num_classes != catalog.num_classes:
        raise ContractError("label map class count does not match catalog")
    scores = y_t.onehot.astype(np.int64) @ catalog.head_vector().astype(np.int64)
    return BinaryMask(scores.astype(np.uint8))


def tail_mask(y_s_tail: LabelMap) -> BinaryMask:
    """Binary mask of the (already tail-restricted) source label."""
    return class_mask(y_s_tail, range(y_s_tail.num_classes))


def ct_mask(m_t_head: BinaryMask, m_s_tail: BinaryMask) -> BinaryMask:
    """Elementwise product of the head mask and the source tail mask."""
    if m_t_head.shape != m_s_tail.shape:
        raise ContractError(f"mask shapes differ: {m_t_head.shape} vs {m_s_tail.shape}")
    return BinaryMask(m_t_head.mask * m_s_tail.mask)


def input_transfer(i_s2t: Image, i_t: Image, m_ct: BinaryMask) -> Image:
    """Blend: translated source pixels on the mask, target pixels elsewhere."""
    if i_s2t.shape != i_t.shape or i_s2t.shape != m_ct.shape:
        raise ContractError(
            f"shapes differ: {i_s2t.shape}, {i_t.shape}, mask {m_ct.shape}"
        )
    m = m_ct.mask[:, :, None].astype(np.float64)
    pixels = m * i_s2t.pixels + (1.0 - m) * i_t.pixels
    return Image(pixels, "target")


def output_transfer(y_s: LabelMap, y_t_ct: LabelMap, m_ct: BinaryMask) -> LabelMap:
    """Blend: exact source labels on the mask, the pseudo label elsewhere."""
    if y_s.onehot.shape != y_t_ct.onehot.shape or y_s.shape != m_ct.shape:
        raise ContractError(
            f"shapes differ: {y_s.onehot.shape}, {y_t_ct.onehot.shape}, mask {m_ct.shape}"
        )
    m = m_ct.mask[:, :, None]
    onehot = m * y_s.onehot + (1 - m) * y_t_ct.onehot
    return LabelMap(onehot)
