"""Toy-scale networks: shared-stem encoders, style-modulated generators,
segmenter, and patch discriminators, plus the translation compositions.

The first convolution stage is a single module instance (``stem``) used by
the content encoder and both style encoders, so its parameters have exactly
one storage identity. Content features live at a quarter of the input
resolution; images therefore must have sides divisible by 4 (and by 8
wherever a discriminator is applied).

Tensor-level methods on :class:`NetworkBundle` are batched and channel-first;
the module-level functions wrap them for single ``datamodel`` rasters.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import Image, LabelMap, ProbabilityMap
from .errors import ContractError, NumericFailureError


@dataclass(frozen=True)
class ContentFeature:
    """C x H/4 x W/4 domain-invariant feature map."""

    feature: torch.Tensor

    def __post_init__(self):
        if self.feature.ndim != 3:
            raise ContractError("content feature must be CxHxW")
        if not torch.isfinite(self.feature).all():
            raise NumericFailureError("content feature contains non-finite values")


@dataclass(frozen=True)
class StyleCode:
    """Fixed-length style vector."""

    code: torch.Tensor

    def __post_init__(self):
        if self.code.ndim != 1:
            raise ContractError("style code must be a vector")
        if not torch.isfinite(self.code).all():
            raise NumericFailureError("style code contains non-finite values")


@dataclass(frozen=True)
class NetworkConfig:
    classes: int = 8
    content_channels: int = 64
    style_dim: int = 8
    stem_channels: int = 32
    disc_channels: int = 32

    def __post_init__(self):
        for name in ("classes", "content_channels", "style_dim", "stem_channels", "disc_channels"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.content_channels % 2:
            raise ContractError("content_channels must be even")


class _StyleTail(nn.Module):
    def __init__(self, stem_channels, channels, style_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(stem_channels, channels, 3, 2, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 2, 1)
        self.fc = nn.Linear(channels, style_dim)

    def forward(self, feats):
        x = F.relu(self.conv1(feats))
        x = F.relu(self.conv2(x))
        x = x.mean(dim=(2, 3))
        return self.fc(x)


class _Generator(nn.Module):
    """Decodes a content map to an image, modulated per-channel by the style code."""

    def __init__(self, channels, style_dim):
        super().__init__()
        half = channels // 2
        self.half = half
        self.mlp = nn.Linear(style_dim, 2 * channels + 2 * half)
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm1 = nn.InstanceNorm2d(channels, affine=False)
        self.conv2 = nn.Conv2d(channels, half, 3, 1, 1)
        self.norm2 = nn.InstanceNorm2d(half, affine=False)
        self.conv3 = nn.Conv2d(half, 3, 3, 1, 1)

    def forward(self, style, content):
        c = self.conv1.in_channels
        params = self.mlp(style)
        g1, b1 = params[:, :c], params[:, c : 2 * c]
        g2, b2 = params[:, 2 * c : 2 * c + self.half], params[:, 2 * c + self.half :]
        x = self.norm1(self.conv1(content))
        x = F.relu(x * (1.0 + g1[:, :, None, None]) + b1[:, :, None, None])
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.norm2(self.conv2(x))
        x = F.relu(x * (1.0 + g2[:, :, None, None]) + b2[:, :, None, None])
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.conv3(x))


class _Segmenter(nn.Module):
    def __init__(self, channels, classes):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, classes, 1)

    def forward(self, content):
        return self.conv2(F.relu(self.conv1(content)))


def _patch_disc(in_channels, base):
    return nn.Sequential(
        nn.Conv2d(in_channels, base, 4, 2, 1),
        nn.LeakyReLU(0.2),
        nn.Conv2d(base, 2 * base, 4, 2, 1),
        nn.LeakyReLU(0.2),
        nn.Conv2d(2 * base, 1, 4, 2, 1),
    )


class NetworkBundle(nn.Module):
    """All networks of the model under canonical submodule names."""

    def __init__(self, config: NetworkConfig | None = None, dtype=torch.float64):
        super().__init__()
        config = config or NetworkConfig()
        self.config = config
        s, c, d = config.stem_channels, config.content_channels, config.style_dim
        self.stem = nn.Sequential(nn.Conv2d(3, s, 3, 2, 1), nn.ReLU())
        self.e_c = nn.Sequential(
            nn.Conv2d(s, c, 3, 2, 1),
            nn.ReLU(),
            nn.Conv2d(c, c, 3, 1, 1),
            nn.ReLU(),
            nn.Conv2d(c, c, 3, 1, 1),
        )
        self.e_s = _StyleTail(s, c, d)
        self.e_t = _StyleTail(s, c, d)
        self.g_c = _Segmenter(c, config.classes)
        self.g_s = _Generator(c, d)
        self.g_t = _Generator(c, d)
        self.d_img_s = _patch_disc(3, config.disc_channels)
        self.d_img_t = _patch_disc(3, config.disc_channels)
        self.d_out = _patch_disc(config.classes, config.disc_channels)
        self.to(dtype)

    @classmethod
    def create(cls, config: NetworkConfig | None = None, seed: int = 0, dtype=torch.float64):
        """Build and initialize deterministically from a seed.

        Weights are normal with fan-in scaling (std = sqrt(2/fan_in)); the
        encoder/segmenter stack has no normalization layers, so a fixed small
        gain would shrink activations to zero layer by layer.
        """
        nets = cls(config, dtype=dtype)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for p in nets.parameters():
                if p.ndim > 1:
                    fan_in = int(np.prod(p.shape[1:]))
                    std = math.sqrt(2.0 / fan_in)
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)
                else:
                    p.zero_()
        return nets

    # --- batched tensor paths (channel-first) ---

    def _check_input(self, x, multiple):
        if x.ndim != 4:
            raise ContractError(f"expected a BxCxHxW tensor, got shape {tuple(x.shape)}")
        if x.shape[2] % multiple or x.shape[3] % multiple:
            raise ContractError(
                f"spatial dims must be divisible by {multiple}, got {tuple(x.shape[2:])}"
            )

    def stem_features(self, x):
        self._check_input(x, 4)
        return self.stem(x)

    def stem_features_frozen(self, x):
        """Stem features that do not backpropagate into the stem parameters.

        Gradient still flows to ``x`` (so losses on translated images keep
        training the generators); used by the style-suppression terms, whose
        cheapest optimum would otherwise be a dead shared stem.
        """
        self._check_input(x, 4)
        conv = self.stem[0]
        return F.relu(
            F.conv2d(x, conv.weight.detach(), conv.bias.detach(), conv.stride, conv.padding)
        )

    def content_from(self, feats):
        return self.e_c(feats)

    def content(self, x):
        return self.content_from(self.stem_features(x))

    def style_from(self, feats, domain):
        if domain == "source":
            return self.e_s(feats)
        if domain == "target":
            return self.e_t(feats)
        raise ContractError(f"unknown style domain {domain!r}")

    def style(self, x, domain):
        return self.style_from(self.stem_features(x), domain)

    def generate(self, style, content, domain):
        if domain == "source":
            return self.g_s(style, content)
        if domain == "target":
            return self.g_t(style, content)
        raise ContractError(f"unknown generator domain {domain!r}")

    def seg_logits(self, content):
        return self.g_c(content)

    def seg_probs(self, content):
        logits = F.interpolate(
            self.seg_logits(content), scale_factor=4, mode="bilinear", align_corners=False
        )
        return F.softmax(logits, dim=1)

    def disc(self, x, which):
        if which in ("img_s", "img_t"):
            if x.shape[1] != 3:
                raise ContractError("image discriminators take 3-channel input")
            head = self.d_img_s if which == "img_s" else self.d_img_t
        elif which == "out":
            if x.shape[1] != self.config.classes:
                raise ContractError("output discriminator takes K-channel input")
            head = self.d_out
        else:
            raise ContractError(f"unknown discriminator {which!r}")
        self._check_input(x, 8)
        return head(x)


# --- single-raster wrappers over the datamodel types ---


def image_to_tensor(image: Image, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(np.moveaxis(image.pixels, 2, 0), dtype=dtype).unsqueeze(0)


def tensor_to_image(t: torch.Tensor, domain_tag: str) -> Image:
    arr = t.detach().squeeze(0).numpy()
    return Image(np.moveaxis(arr, 0, 2), domain_tag)


def labelmap_to_tensor(y: LabelMap, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(np.moveaxis(y.onehot, 2, 0), dtype=dtype)


def probs_to_map(t: torch.Tensor) -> ProbabilityMap:
    arr = t.detach().squeeze(0).numpy()
    return ProbabilityMap(np.moveaxis(arr, 0, 2))


def _finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericFailureError(f"{what} produced non-finite values")
    return t


def encode_content(image: Image, nets: NetworkBundle) -> ContentFeature:
    with torch.no_grad():
        feat = _finite(nets.content(image_to_tensor(image, _dtype(nets))), "content encoder")
    return ContentFeature(feat.squeeze(0))


def encode_style(image: Image, domain: str, nets: NetworkBundle) -> StyleCode:
    with torch.no_grad():
        code = _finite(nets.style(image_to_tensor(image, _dtype(nets)), domain), "style encoder")
    return StyleCode(code.squeeze(0))


def generate_image(style: StyleCode, content: ContentFeature, domain: str, nets: NetworkBundle) -> Image:
    with torch.no_grad():
        out = _finite(
            nets.generate(style.code.unsqueeze(0), content.feature.unsqueeze(0), domain),
            "generator",
        )
    tag = "translated-source" if domain == "source" else "translated-target"
    return tensor_to_image(out, tag)


def segment(content: ContentFeature, nets: NetworkBundle) -> ProbabilityMap:
    with torch.no_grad():
        probs = _finite(nets.seg_probs(content.feature.unsqueeze(0)), "segmenter")
    return probs_to_map(probs)


def translate(i_src_dom: Image, i_style_donor: Image, direction: str, nets: NetworkBundle) -> Image:
    """Move ``i_src_dom``'s content into the other domain's style.

    ``s2t`` composes the target generator with the target-style code of the
    donor; ``t2s`` is the mirror composition.
    """
    if direction not in ("s2t", "t2s"):
        raise ContractError(f"unknown direction {direction!r}")
    dst = "target" if direction == "s2t" else "source"
    style = encode_style(i_style_donor, dst, nets)
    content = encode_content(i_src_dom, nets)
    return generate_image(style, content, dst, nets)


def discriminate(x, which: str, nets: NetworkBundle) -> np.ndarray:
    if which in ("img_s", "img_t"):
        if not isinstance(x, Image):
            raise ContractError("image discriminators take an Image")
        t = image_to_tensor(x, _dtype(nets))
    elif which == "out":
        if not isinstance(x, ProbabilityMap):
            raise ContractError("the output discriminator takes a ProbabilityMap")
        t = torch.tensor(np.moveaxis(x.probs, 2, 0), dtype=_dtype(nets)).unsqueeze(0)
    else:
        raise ContractError(f"unknown discriminator {which!r}")
    with torch.no_grad():
        scores = _finite(nets.disc(t, which), "discriminator")
    return scores.squeeze(0).squeeze(0).numpy()


def _dtype(nets: NetworkBundle):
    return next(nets.parameters()).dtype


# --- checkpoint io ---

CHECKPOINT_VERSION = 1


def save_checkpoint(nets: NetworkBundle, path, extra: dict | None = None) -> None:
    """Write a versioned parameter file under canonical names."""
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "network_config": asdict(nets.config),
            "params": nets.state_dict(),
            "extra": dict(extra or {}),
        },
        path,
    )


def load_checkpoint(path):
    """Load a checkpoint; returns (NetworkBundle, extra dict)."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version!r}")
    nets = NetworkBundle(NetworkConfig(**blob["network_config"]))
    nets.load_state_dict(blob["params"])
    nets.eval()
    return nets, blob.get("extra", {})
