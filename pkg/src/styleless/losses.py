"""Training objectives as pure tensor functions.

All functions take ``torch`` tensors (channel-first, optionally batched) and
return scalar tensors, so each term is independently testable and
differentiable. L1 and cross-entropy terms use mean reduction: L1 over all
elements, cross-entropy over labeled pixels.
"""

import math
from dataclasses import dataclass

import torch

from .errors import ContractError, InvariantViolationError

LOG_EPS = 1e-8


@dataclass
class LossWeights:
    """Weights of the total objective plus the per-class CE weights.

    ``class_weights`` of None means uniform weighting. Defaults are tuned for
    from-scratch desk-scale training, where heavy cycle/reconstruction and
    image-adversarial weights overwhelm the segmentation signal in the shared
    encoder.
    """

    zero: float = 1.0
    zero_trans: float = 1.0
    seg: float = 1.0
    cycle: float = 2.0
    rec: float = 2.0
    adv_img: float = 0.1
    adv_out: float = 0.01
    seg_ct: float = 1.0
    class_weights: torch.Tensor | None = None

    def __post_init__(self):
        for name in ("zero", "zero_trans", "seg", "cycle", "rec", "adv_img", "adv_out", "seg_ct"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0.0:
                raise ContractError(f"loss weight {name} must be finite and >= 0")
            setattr(self, name, v)
        if self.class_weights is not None:
            w = torch.as_tensor(self.class_weights, dtype=torch.float64)
            if w.ndim != 1 or not torch.isfinite(w).all() or (w < 0).any():
                raise ContractError("class_weights must be a finite nonnegative K-vector")
            self.class_weights = w


def class_balanced_weights(pixel_counts, beta: float = 0.999) -> torch.Tensor:
    """Effective-number class weights (1-beta)/(1-beta^n), mean-normalized.

    Classes with zero pixels get weight 0 and are excluded from the
    normalization (they never contribute to a loss anyway).
    """
    if not 0.0 <= beta < 1.0:
        raise ContractError("beta must lie in [0, 1)")
    n = torch.as_tensor(pixel_counts, dtype=torch.float64)
    if (n < 0).any():
        raise ContractError("pixel counts must be nonnegative")
    present = n > 0
    w = torch.zeros_like(n)
    if beta == 0.0:
        w[present] = 1.0
    else:
        w[present] = (1.0 - beta) / (1.0 - beta ** n[present])
    if present.any():
        w = w / w[present].mean()
    return w


def l1_zero(code: torch.Tensor) -> torch.Tensor:
    """Mean absolute deviation of a style code from zero."""
    return code.abs().mean()


def zero_loss(e_t_of_is: torch.Tensor, e_s_of_it: torch.Tensor) -> torch.Tensor:
    """Push both cross-domain style codes toward zero."""
    return l1_zero(e_t_of_is) + l1_zero(e_s_of_it)


def zero_trans_loss(e_s_of_is2t: torch.Tensor, e_t_of_it2s: torch.Tensor) -> torch.Tensor:
    """Same functional form as zero_loss, applied to translated-image codes."""
    return l1_zero(e_s_of_is2t) + l1_zero(e_t_of_it2s)


def _as_batched(p: torch.Tensor, y: torch.Tensor):
    if p.shape != y.shape:
        raise ContractError(f"probability/label shapes differ: {tuple(p.shape)} vs {tuple(y.shape)}")
    if p.ndim == 3:
        return p.unsqueeze(0), y.unsqueeze(0)
    if p.ndim == 4:
        return p, y
    raise ContractError(f"expected (K,H,W) or (B,K,H,W), got {tuple(p.shape)}")


def weighted_cross_entropy(p: torch.Tensor, y: torch.Tensor, w: torch.Tensor | None = None) -> torch.Tensor:
    """Class-weighted CE over labeled pixels, mean reduction.

    ``p`` holds probabilities (clamped at 1e-8 before the log), ``y`` one-hot
    targets where an all-zero channel column marks an unlabeled pixel. Returns
    0 when nothing is labeled.
    """
    p, y = _as_batched(p, y)
    k = p.shape[1]
    if w is None:
        w = torch.ones(k, dtype=p.dtype, device=p.device)
    else:
        w = torch.as_tensor(w, dtype=p.dtype, device=p.device)
        if w.shape != (k,):
            raise ContractError(f"weight vector has shape {tuple(w.shape)}, expected ({k},)")
    y = y.to(p.dtype)
    n_labeled = y.sum()
    if n_labeled.item() == 0:
        return p.new_zeros(())
    log_p = torch.log(p.clamp_min(LOG_EPS))
    per_pixel = (y * w[None, :, None, None] * log_p).sum(dim=1)
    return -per_pixel.sum() / n_labeled


def seg_loss(
    p_s: torch.Tensor,
    y_s: torch.Tensor,
    p_s2t: torch.Tensor,
    y_s2t: torch.Tensor,
    w: torch.Tensor | None = None,
) -> torch.Tensor:
    """CE on the source prediction plus CE on the translated-source prediction.

    The translated image keeps the source content, so its label must be the
    very same object as the source label; anything else is a forgery.
    """
    if y_s2t is not y_s:
        raise InvariantViolationError(
            "the translated-source label must be the identical object as the source label"
        )
    return weighted_cross_entropy(p_s, y_s, w) + weighted_cross_entropy(p_s2t, y_s, w)


def zero_style_loss(zero: torch.Tensor, zero_trans: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
    """Composite style-suppression + content-alignment objective."""
    return zero + zero_trans + seg


def l1_image(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference."""
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(i_s2t2s, i_s, i_t2s2t, i_t) -> torch.Tensor:
    """L1 of both double translations against the originals."""
    return l1_image(i_s2t2s, i_s) + l1_image(i_t2s2t, i_t)


def rec_loss(i_s2s, i_s, i_t2t, i_t) -> torch.Tensor:
    """L1 of both same-domain reconstructions against the originals."""
    return l1_image(i_s2s, i_s) + l1_image(i_t2t, i_t)


def adversarial_losses(scores_real, scores_fake, role: str) -> torch.Tensor:
    """Least-squares adversarial objective for one discriminator's scores."""
    if role == "discriminator":
        if scores_real is None:
            raise ContractError("discriminator loss needs real scores")
        return ((scores_real - 1.0) ** 2).mean() + (scores_fake**2).mean()
    if role == "generator":
        return ((scores_fake - 1.0) ** 2).mean()
    raise ContractError(f"unknown role {role!r}")


def seg_ct_loss(p_t_ct: torch.Tensor, y_t_ct: torch.Tensor, w: torch.Tensor | None = None) -> torch.Tensor:
    """CE on the content-transferred prediction against its improved pseudo label."""
    return weighted_cross_entropy(p_t_ct, y_t_ct, w)


def total_loss(
    weights: LossWeights,
    *,
    zero=0.0,
    zero_trans=0.0,
    seg=0.0,
    cycle=0.0,
    rec=0.0,
    adv_img=0.0,
    adv_out=0.0,
    seg_ct=0.0,
):
    """Weighted sum of all terms (missing terms default to zero)."""
    return (
        weights.rec * rec
        + weights.adv_img * adv_img
        + weights.adv_out * adv_out
        + weights.zero * zero
        + weights.zero_trans * zero_trans
        + weights.seg * seg
        + weights.cycle * cycle
        + weights.seg_ct * seg_ct
    )
