"""Two-stage alternating training loop.

Stage 1 trains the adaptation machinery: domain translation with cycle and
reconstruction anchors, the style-suppression objective, source segmentation
supervision (on source and translated-source predictions), adversarial
alignment, and optional self-training on refreshed target pseudo labels.
Stage 2 keeps all of that and adds tail-class content transfer.

Every step first updates the discriminators on freshly generated (no-grad)
fakes, then updates the encoders, generators, and segmenter; the two phases
never touch each other's parameters. The segmentation model (stem + content
encoder + segmenter) uses SGD, generators and style encoders use Adam, and
each discriminator group has its own Adam; all learning rates follow one
polynomial decay schedule.

Training runs in float64 on a single thread, so two runs from the same seed
on one machine produce bit-identical loss logs and checkpoints.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import content_transfer as ct
from . import losses as L
from . import metrics, pseudolabel, synthdata
from .datamodel import ClassCatalog, Image, onehot_encode
from .errors import ConfigError, ContractError, NumericFailureError
from .networks import NetworkBundle, NetworkConfig, probs_to_map, save_checkpoint

# full-scale learning rates quoted for reference; desk-scale defaults below
# are retuned because every loss here is mean-reduced and training starts
# from random weights
PAPER_LEARNING_RATES = {"seg": 2.5e-6, "gen": 1.0e-5, "disc_out": 1.0e-6, "disc_img": 1.0e-6}

VARIANTS = ("source_only", "uda_st", "uda_ct")


@dataclass
class TrainConfig:
    stage1_iters: int = 2000
    stage2_iters: int = 2000
    batch_size: int = 2
    resize: tuple = (64, 128)
    crop: tuple = (32, 64)
    seed: int = 0
    lr_seg: float = 0.1
    momentum_seg: float = 0.9
    lr_gen: float = 2.0e-3
    betas_gen: tuple = (0.5, 0.999)
    lr_disc_out: float = 1.0e-4
    betas_disc_out: tuple = (0.9, 0.99)
    lr_disc_img: float = 1.0e-4
    betas_disc_img: tuple = (0.5, 0.999)
    poly_power: float = 0.9
    pseudo_refresh_every: int = 200
    self_train: bool = True
    self_train_weight: float = 0.5
    self_train_start: int = 500
    variant: str = "uda_ct"
    eval_every: int = 0

    def __post_init__(self):
        self.resize = tuple(int(v) for v in self.resize)
        self.crop = tuple(int(v) for v in self.crop)
        self.betas_gen = tuple(float(v) for v in self.betas_gen)
        self.betas_disc_out = tuple(float(v) for v in self.betas_disc_out)
        self.betas_disc_img = tuple(float(v) for v in self.betas_disc_img)
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.resize) != 2 or len(self.crop) != 2:
            raise ConfigError("resize and crop must be (H, W) pairs")
        if any(c > r for c, r in zip(self.crop, self.resize)):
            raise ConfigError("crop must not exceed resize")
        if any(v % 8 for v in self.crop):
            raise ConfigError("crop sides must be divisible by 8")
        for name in ("lr_seg", "lr_gen", "lr_disc_out", "lr_disc_img"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0 (0 freezes the group)")
        if self.pseudo_refresh_every < 1:
            raise ConfigError("pseudo_refresh_every must be >= 1")
        if self.self_train_start < 0:
            raise ConfigError("self_train_start must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class DataConfig:
    source: str | None = None
    target: str | None = None
    val: str | None = None
    catalog: str | None = None


@dataclass
class LossConfig:
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    cb_beta: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.cb_beta < 1.0:
            raise ConfigError("cb_beta must lie in [0, 1)")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)

    def catalog(self) -> ClassCatalog:
        if self.data.catalog:
            return synthdata.load_catalog_json(self.data.catalog)
        return synthdata.toy_catalog()


def _load_toml(path):
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc


def _build_section(cls, doc, section):
    known = set(cls.__dataclass_fields__)
    body = doc.get(section, {})
    unknown = set(body) - known
    if unknown:
        raise ConfigError(f"unknown key [{section}].{sorted(unknown)[0]}")
    try:
        return cls(**body)
    except ConfigError:
        raise
    except (TypeError, ValueError, ContractError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def load_run_config(path) -> RunConfig:
    """Parse a [data]/[networks]/[losses]/[trainer] TOML run config."""
    doc = _load_toml(path)
    unknown = set(doc) - {"data", "networks", "losses", "trainer"}
    if unknown:
        raise ConfigError(f"unknown section [{sorted(unknown)[0]}]")
    loss_body = dict(doc.get("losses", {}))
    cb_beta = loss_body.pop("cb_beta", 0.999)
    weight_keys = {
        "zero", "zero_trans", "seg", "cycle", "rec", "adv_img", "adv_out", "seg_ct",
    }
    unknown = set(loss_body) - weight_keys
    if unknown:
        raise ConfigError(f"unknown key [losses].{sorted(unknown)[0]}")
    try:
        weights = L.LossWeights(**loss_body)
    except Exception as exc:
        raise ConfigError(f"invalid [losses] section: {exc}") from exc
    return RunConfig(
        data=_build_section(DataConfig, doc, "data"),
        networks=_build_section(NetworkConfig, doc, "networks"),
        losses=LossConfig(weights=weights, cb_beta=cb_beta),
        trainer=_build_section(TrainConfig, doc, "trainer"),
    )


def config_snapshot_toml(config: RunConfig) -> str:
    """Serialize the resolved run config back to TOML."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (tuple, list)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        raise TypeError(f"cannot serialize {type(v)}")

    lines = []
    sections = {
        "data": asdict(config.data),
        "networks": asdict(config.networks),
        "losses": {**{k: getattr(config.losses.weights, k) for k in (
            "zero", "zero_trans", "seg", "cycle", "rec", "adv_img", "adv_out", "seg_ct")},
            "cb_beta": config.losses.cb_beta},
        "trainer": asdict(config.trainer),
    }
    for name, body in sections.items():
        lines.append(f"[{name}]")
        for key, value in body.items():
            if value is None:
                continue
            lines.append(f"{key} = {fmt(value)}")
        lines.append("")
    return "\n".join(lines)


def poly_lr(base: float, step: int, total: int, power: float) -> float:
    """Polynomial decay: base * (1 - step/total) ** power."""
    if total <= 0:
        return base
    return base * (1.0 - step / total) ** power


def _f(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


@dataclass
class StepReport:
    step: int
    stage: str
    terms: dict
    ct_fired: bool
    ct_count: int
    lrs: dict

    def to_json(self) -> str:
        doc = {
            "step": self.step,
            "stage": self.stage,
            "ct_fired": self.ct_fired,
            "ct_count": self.ct_count,
            "terms": self.terms,
            "lrs": self.lrs,
        }
        return json.dumps(doc)


def _resize_image(pixels: np.ndarray, size) -> np.ndarray:
    h, w = size
    t = torch.tensor(np.moveaxis(pixels, 2, 0), dtype=torch.float64).unsqueeze(0)
    out = torch.nn.functional.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return np.moveaxis(out.squeeze(0).clamp(0.0, 1.0).numpy(), 0, 2)


def _resize_labels(indices: np.ndarray, size) -> np.ndarray:
    h, w = size
    hi, wi = indices.shape
    rows = np.floor((np.arange(h) + 0.5) * hi / h).astype(np.int64)
    cols = np.floor((np.arange(w) + 0.5) * wi / w).astype(np.int64)
    return indices[rows[:, None], cols[None, :]]


@dataclass
class _SourceItem:
    pixels: np.ndarray  # resized, HxWx3
    labels: np.ndarray  # resized, HxW with 255
    gate: bool  # instance gate evaluated on the full-resolution label


@dataclass
class _TargetItem:
    pixels: np.ndarray
    pseudo: np.ndarray | None = None  # resized HxW with 255, refreshed in-loop


class Trainer:
    """Owns the networks, optimizers, data order, and pseudo-label cache."""

    def __init__(
        self,
        nets: NetworkBundle,
        catalog: ClassCatalog,
        config: TrainConfig,
        weights: L.LossWeights,
        source_items,
        target_items,
        policy: ct.TransferPolicy | None = None,
    ):
        self.nets = nets
        self.catalog = catalog
        self.config = config
        self.weights = weights
        self.policy = policy
        self.total_steps = config.stage1_iters + config.stage2_iters
        resize = config.resize

        self.source = [
            _SourceItem(
                pixels=_resize_image(img.pixels, resize),
                labels=_resize_labels(lab.to_indices(), resize),
                gate=bool(policy and ct.gate_transfer(lab, policy)),
            )
            for img, lab in source_items
        ]
        self.target = [
            _TargetItem(pixels=_resize_image(img.pixels, resize)) for img, _ in target_items
        ]
        if not self.source:
            raise ConfigError("source dataset is empty")
        if config.variant != "source_only" and not self.target:
            raise ConfigError("target dataset is empty")

        self.rng = np.random.default_rng(config.seed)
        self.opt_seg = torch.optim.SGD(
            list(nets.stem.parameters()) + list(nets.e_c.parameters()) + list(nets.g_c.parameters()),
            lr=config.lr_seg,
            momentum=config.momentum_seg,
        )
        self.opt_gen = torch.optim.Adam(
            list(nets.e_s.parameters()) + list(nets.e_t.parameters())
            + list(nets.g_s.parameters()) + list(nets.g_t.parameters()),
            lr=config.lr_gen,
            betas=config.betas_gen,
        )
        self.opt_disc_img = torch.optim.Adam(
            list(nets.d_img_s.parameters()) + list(nets.d_img_t.parameters()),
            lr=config.lr_disc_img,
            betas=config.betas_disc_img,
        )
        self.opt_disc_out = torch.optim.Adam(
            nets.d_out.parameters(), lr=config.lr_disc_out, betas=config.betas_disc_out
        )
        self._base_lrs = {
            "seg": config.lr_seg,
            "gen": config.lr_gen,
            "disc_img": config.lr_disc_img,
            "disc_out": config.lr_disc_out,
        }
        self._gen_side = [nets.stem, nets.e_c, nets.e_s, nets.e_t, nets.g_c, nets.g_s, nets.g_t]
        self._disc_side = [nets.d_img_s, nets.d_img_t, nets.d_out]

    # --- plumbing ---

    def _dtype(self):
        return next(self.nets.parameters()).dtype

    def _apply_lr(self, step: int) -> dict:
        lrs = {
            name: poly_lr(base, step, self.total_steps, self.config.poly_power)
            for name, base in self._base_lrs.items()
        }
        for opt, name in (
            (self.opt_seg, "seg"),
            (self.opt_gen, "gen"),
            (self.opt_disc_img, "disc_img"),
            (self.opt_disc_out, "disc_out"),
        ):
            for group in opt.param_groups:
                group["lr"] = lrs[name]
        return lrs

    def _set_requires_grad(self, modules, flag: bool):
        for m in modules:
            for p in m.parameters():
                p.requires_grad_(flag)

    def _onehot_tensor(self, indices: np.ndarray) -> torch.Tensor:
        k = self.catalog.num_classes
        oh = np.zeros((k,) + indices.shape, dtype=np.float64)
        for c in range(k):
            oh[c][indices == c] = 1.0
        return torch.tensor(oh, dtype=self._dtype())

    def sample_batch(self, step: int) -> dict:
        """Draw source/target items and crop offsets for one step."""
        b = self.config.batch_size
        ch, cw = self.config.crop
        rh, rw = self.config.resize
        rng = self.rng
        src_idx = rng.integers(0, len(self.source), size=b)
        tgt_idx = rng.integers(0, len(self.target), size=b) if self.target else np.zeros(b, int)
        crops = [
            (int(rng.integers(0, rh - ch + 1)), int(rng.integers(0, rw - cw + 1)))
            for _ in range(2 * b)
        ]
        return {"source": src_idx, "target": tgt_idx, "crops": crops}

    def _gather(self, batch):
        b = self.config.batch_size
        ch, cw = self.config.crop
        xs, ys, gates = [], [], []
        for n, i in enumerate(batch["source"]):
            item = self.source[int(i)]
            top, left = batch["crops"][n]
            xs.append(np.moveaxis(item.pixels[top : top + ch, left : left + cw], 2, 0))
            ys.append(item.labels[top : top + ch, left : left + cw])
            gates.append(item.gate)
        xt, pt = [], []
        if self.target:
            for n, i in enumerate(batch["target"]):
                item = self.target[int(i)]
                top, left = batch["crops"][b + n]
                xt.append(np.moveaxis(item.pixels[top : top + ch, left : left + cw], 2, 0))
                if item.pseudo is not None:
                    pt.append(item.pseudo[top : top + ch, left : left + cw])
        dtype = self._dtype()
        x_s = torch.tensor(np.stack(xs), dtype=dtype)
        x_t = torch.tensor(np.stack(xt), dtype=dtype) if xt else None
        y_s = torch.stack([self._onehot_tensor(y) for y in ys])
        pseudo = np.stack(pt) if pt else None
        return x_s, y_s, np.stack(ys), x_t, pseudo, gates

    def refresh_pseudo_labels(self):
        """Recompute every target pseudo label from the current networks."""
        if not self.target:
            return
        dtype = self._dtype()
        chunk = 16
        with torch.no_grad():
            for start in range(0, len(self.target), chunk):
                items = self.target[start : start + chunk]
                x = torch.tensor(
                    np.stack([np.moveaxis(it.pixels, 2, 0) for it in items]), dtype=dtype
                )
                probs = self.nets.seg_probs(self.nets.content(x))
                for it, p in zip(items, probs):
                    pm = probs_to_map(p.unsqueeze(0))
                    it.pseudo = pseudolabel.generate_pseudo_label(pm).to_indices()

    def _check_finite(self, terms: dict):
        for name, value in terms.items():
            if not math.isfinite(value):
                raise NumericFailureError(f"loss term {name!r} is non-finite at training time")

    # --- steps ---

    def _step_source_only(self, step: int, batch) -> StepReport:
        lrs = self._apply_lr(step)
        x_s, y_s, _, _, _, _ = self._gather(batch)
        self.opt_seg.zero_grad(set_to_none=True)
        p_s = self.nets.seg_probs(self.nets.content(x_s))
        loss = L.weighted_cross_entropy(p_s, y_s, self.weights.class_weights)
        terms = {"seg_src": _f(loss), "total": _f(loss)}
        self._check_finite(terms)
        loss.backward()
        self.opt_seg.step()
        return StepReport(step, "stage1" if step < self.config.stage1_iters else "stage2",
                          terms, False, 0, lrs)

    def _forward_translation(self, x_s, x_t):
        nets = self.nets
        both = torch.cat([x_s, x_t], dim=0)
        feats = nets.stem_features(both)
        content = nets.content_from(feats)
        b = x_s.shape[0]
        f_s, f_t = feats[:b], feats[b:]
        c_s, c_t = content[:b], content[b:]
        s_s = nets.e_s(f_s)
        s_t = nets.e_t(f_t)
        i_s2t = nets.g_t(s_t, c_s)
        i_t2s = nets.g_s(s_s, c_t)
        return f_s, f_t, c_s, c_t, s_s, s_t, i_s2t, i_t2s

    def _phase_disc(self, x_s, x_t):
        nets = self.nets
        with torch.no_grad():
            _, _, c_s, c_t, _, _, i_s2t, i_t2s = self._forward_translation(x_s, x_t)
            p_s = nets.seg_probs(c_s)
            p_t = nets.seg_probs(c_t)
        self._set_requires_grad(self._disc_side, True)
        self.opt_disc_img.zero_grad(set_to_none=True)
        self.opt_disc_out.zero_grad(set_to_none=True)
        d_img_s = L.adversarial_losses(nets.disc(x_s, "img_s"), nets.disc(i_t2s, "img_s"), "discriminator")
        d_img_t = L.adversarial_losses(nets.disc(x_t, "img_t"), nets.disc(i_s2t, "img_t"), "discriminator")
        d_out = L.adversarial_losses(nets.disc(p_s, "out"), nets.disc(p_t, "out"), "discriminator")
        (d_img_s + d_img_t + d_out).backward()
        self.opt_disc_img.step()
        self.opt_disc_out.step()
        return {"d_img_s": _f(d_img_s), "d_img_t": _f(d_img_t), "d_out": _f(d_out)}

    def _phase_gen(self, step, x_s, y_s, y_s_np, x_t, pseudo_np, gates, with_ct: bool):
        nets = self.nets
        cfg = self.config
        w = self.weights
        self._set_requires_grad(self._disc_side, False)
        self.opt_seg.zero_grad(set_to_none=True)
        self.opt_gen.zero_grad(set_to_none=True)

        f_s, f_t, c_s, c_t, s_s, s_t, i_s2t, i_t2s = self._forward_translation(x_s, x_t)
        # style-suppression terms train the style tails (and, via translated
        # images, the generators) but not the shared stem: a trainable stem
        # would satisfy them by dying
        z_cross_s = nets.e_t(f_s.detach())  # target-style reading of a source image
        z_cross_t = nets.e_s(f_t.detach())
        i_s2s = nets.g_s(s_s, c_s)
        i_t2t = nets.g_t(s_t, c_t)

        trans = torch.cat([i_s2t, i_t2s], dim=0)
        feats2 = nets.stem_features(trans)
        content2 = nets.content_from(feats2)
        b = x_s.shape[0]
        f_s2t, f_t2s = feats2[:b], feats2[b:]
        c_s2t, c_t2s = content2[:b], content2[b:]
        frozen2 = nets.stem_features_frozen(trans)
        z_trans_s2t = nets.e_s(frozen2[:b])
        z_trans_t2s = nets.e_t(frozen2[b:])
        i_s2t2s = nets.g_s(nets.e_s(f_t2s), c_s2t)
        i_t2s2t = nets.g_t(nets.e_t(f_s2t), c_t2s)

        p_s = nets.seg_probs(c_s)
        p_s2t = nets.seg_probs(c_s2t)
        p_t = nets.seg_probs(c_t)

        term_zero = L.zero_loss(z_cross_s, z_cross_t)
        term_zero_trans = L.zero_trans_loss(z_trans_s2t, z_trans_t2s)
        term_seg = L.seg_loss(p_s, y_s, p_s2t, y_s, w.class_weights)
        term_cycle = L.cycle_loss(i_s2t2s, x_s, i_t2s2t, x_t)
        term_rec = L.rec_loss(i_s2s, x_s, i_t2t, x_t)
        term_adv_img = L.adversarial_losses(None, nets.disc(i_t2s, "img_s"), "generator") + L.adversarial_losses(None, nets.disc(i_s2t, "img_t"), "generator")
        term_adv_out = L.adversarial_losses(None, nets.disc(p_t, "out"), "generator")

        term_st = p_s.new_zeros(())
        if cfg.self_train and step >= cfg.self_train_start and pseudo_np is not None:
            y_pseudo = torch.stack([self._onehot_tensor(p) for p in pseudo_np])
            term_st = L.weighted_cross_entropy(p_t, y_pseudo)

        term_ct = p_s.new_zeros(())
        ct_count = 0
        if with_ct and self.policy is not None:
            term_ct, ct_count = self._content_transfer_term(
                i_s2t.detach(), x_t, y_s_np, pseudo_np, gates
            )

        total = L.total_loss(
            self.weights,
            zero=term_zero,
            zero_trans=term_zero_trans,
            seg=term_seg,
            cycle=term_cycle,
            rec=term_rec,
            adv_img=term_adv_img,
            adv_out=term_adv_out,
            seg_ct=term_ct,
        ) + cfg.self_train_weight * term_st

        terms = {
            "zero": _f(term_zero),
            "zero_trans": _f(term_zero_trans),
            "seg": _f(term_seg),
            "cycle": _f(term_cycle),
            "rec": _f(term_rec),
            "adv_img": _f(term_adv_img),
            "adv_out": _f(term_adv_out),
            "st": _f(term_st),
            "seg_ct": _f(term_ct),
            "total": _f(total),
        }
        self._check_finite(terms)
        total.backward()
        self.opt_seg.step()
        self.opt_gen.step()
        self._set_requires_grad(self._disc_side, True)
        return terms, ct_count

    def _content_transfer_term(self, i_s2t_detached, x_t, y_s_np, pseudo_np, gates):
        """Eq.-by-eq. tail-class transfer for the gated batch items."""
        if pseudo_np is None:
            return x_t.new_zeros(()), 0
        transferred = []
        for n, gate in enumerate(gates):
            if not gate:
                continue
            y_s_item = onehot_encode(y_s_np[n], self.catalog)
            y_tail = ct.tail_label(y_s_item, self.policy)
            pseudo_item = onehot_encode(pseudo_np[n], self.catalog)
            mask = ct.ct_mask(
                ct.head_mask(pseudo_item, self.catalog), ct.tail_mask(y_tail)
            )
            i_s2t_img = Image(
                np.moveaxis(i_s2t_detached[n].numpy(), 0, 2), "translated-target"
            )
            i_t_img = Image(np.moveaxis(x_t[n].detach().numpy(), 0, 2), "target")
            i_t_ct = ct.input_transfer(i_s2t_img, i_t_img, mask)
            transferred.append((n, i_t_ct, y_s_item, mask))
        if not transferred:
            return x_t.new_zeros(()), 0

        dtype = self._dtype()
        x_ct = torch.stack(
            [torch.tensor(np.moveaxis(item[1].pixels, 2, 0), dtype=dtype) for item in transferred]
        )
        p_t_ct = self.nets.seg_probs(self.nets.content(x_ct))
        targets = []
        for row, (n, i_t_ct, y_s_item, mask) in enumerate(transferred):
            pm = probs_to_map(p_t_ct[row].detach().unsqueeze(0))
            pseudo_ct = pseudolabel.generate_pseudo_label(pm)
            improved = ct.output_transfer(y_s_item, pseudo_ct, mask)
            targets.append(self._onehot_tensor(improved.to_indices()))
        y_ct = torch.stack(targets)
        loss = L.seg_ct_loss(p_t_ct, y_ct, self.weights.class_weights)
        return loss, len(transferred)

    def train_step_uda(self, step: int, batch=None) -> StepReport:
        """One adaptation step: discriminator phase then generator phase."""
        if self.config.variant == "source_only":
            return self._step_source_only(step, batch or self.sample_batch(step))
        batch = batch or self.sample_batch(step)
        lrs = self._apply_lr(step)
        x_s, y_s, y_s_np, x_t, pseudo, gates = self._gather(batch)
        d_terms = self._phase_disc(x_s, x_t)
        g_terms, _ = self._phase_gen(step, x_s, y_s, y_s_np, x_t, pseudo, gates, with_ct=False)
        return StepReport(step, "stage1", {**g_terms, **d_terms}, False, 0, lrs)

    def train_step_ct(self, step: int, batch=None) -> StepReport:
        """A UDA step plus the gated content-transfer objective."""
        if self.config.variant == "source_only":
            return self._step_source_only(step, batch or self.sample_batch(step))
        batch = batch or self.sample_batch(step)
        lrs = self._apply_lr(step)
        x_s, y_s, y_s_np, x_t, pseudo, gates = self._gather(batch)
        d_terms = self._phase_disc(x_s, x_t)
        g_terms, ct_count = self._phase_gen(
            step, x_s, y_s, y_s_np, x_t, pseudo, gates, with_ct=True
        )
        return StepReport(
            step, "stage2", {**g_terms, **d_terms}, ct_count > 0, ct_count, lrs
        )


def _predictor(nets: NetworkBundle):
    dtype = next(nets.parameters()).dtype

    def predict(image: Image) -> np.ndarray:
        x = torch.tensor(np.moveaxis(image.pixels, 2, 0), dtype=dtype).unsqueeze(0)
        with torch.no_grad():
            probs = nets.seg_probs(nets.content(x))
        return probs.squeeze(0).argmax(dim=0).numpy()

    return predict


@dataclass
class RunResult:
    out_dir: Path
    checkpoint_path: Path
    metrics_history: list
    stats: synthdata.DatasetStats


def run_training(config: RunConfig, out_dir, quiet: bool = True) -> RunResult:
    """Full two-stage run: datasets in, checkpoint + logs + metrics out."""
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    catalog = config.catalog()
    tcfg = config.trainer

    if not config.data.source:
        raise ConfigError("[data].source is required for training")
    source_items = synthdata.load_labeled_dataset(config.data.source, catalog, "source")
    if not source_items:
        raise ConfigError(f"source dataset {config.data.source} is empty")
    target_items = []
    if config.data.target:
        target_items = synthdata.load_labeled_dataset(config.data.target, catalog, "target")
    if tcfg.variant != "source_only" and not target_items:
        raise ConfigError("a nonempty [data].target is required for adaptation variants")
    val_items = []
    if config.data.val:
        val_items = synthdata.load_labeled_dataset(config.data.val, catalog, "target")

    stats = synthdata.compute_stats(source_items, catalog)
    weights = L.LossWeights(
        **{k: getattr(config.losses.weights, k) for k in (
            "zero", "zero_trans", "seg", "cycle", "rec", "adv_img", "adv_out", "seg_ct")},
        class_weights=L.class_balanced_weights(stats.pixel_counts, config.losses.cb_beta),
    )
    policy = ct.TransferPolicy(
        tail_set=catalog.tail_set,
        cooccurrence_rules=synthdata.DEFAULT_COOCCURRENCE
        if catalog.tail_set == synthdata.toy_catalog().tail_set
        else (),
        min_tail_instances=stats.tail_instance_median,
    )

    torch.manual_seed(tcfg.seed)
    nets = NetworkBundle.create(config.networks, seed=tcfg.seed)
    trainer = Trainer(nets, catalog, tcfg, weights, source_items, target_items, policy)

    history = []

    def evaluate(step):
        if not val_items:
            return
        report = metrics.evaluate_dataset(_predictor(nets), val_items, catalog)
        history.append({"step": step, "miou": report["miou"], "miou_tail": report["miou_tail"]})
        if not quiet:
            print(f"step {step}: miou={report['miou']:.4f} miou_tail={report['miou_tail']:.4f}")

    needs_pseudo = tcfg.variant != "source_only" and (
        tcfg.self_train or tcfg.variant == "uda_ct"
    )
    total = trainer.total_steps
    with open(out_dir / "losses.jsonl", "w") as loss_log, open(
        out_dir / "steps.jsonl", "w"
    ) as step_log:
        for step in range(total):
            if needs_pseudo and step % tcfg.pseudo_refresh_every == 0:
                trainer.refresh_pseudo_labels()
            in_stage2 = step >= tcfg.stage1_iters
            if tcfg.variant == "uda_ct" and in_stage2:
                report = trainer.train_step_ct(step)
            else:
                report = trainer.train_step_uda(step)
                report.stage = "stage2" if in_stage2 else "stage1"
            for term, value in report.terms.items():
                loss_log.write(json.dumps({"step": step, "term": term, "value": value}) + "\n")
            step_log.write(report.to_json() + "\n")
            if not quiet and step % 200 == 0:
                print(f"step {step}/{total}: " + ", ".join(f"{k}={v:.4f}" for k, v in report.terms.items()))
            if tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
                evaluate(step + 1)
            elif step + 1 == tcfg.stage1_iters and tcfg.stage2_iters:
                evaluate(step + 1)

    evaluate(total)
    ckpt_path = out_dir / "checkpoint.pt"
    save_checkpoint(
        nets,
        ckpt_path,
        extra={
            "stats": {
                "pixel_counts": stats.pixel_counts.tolist(),
                "tail_instance_median": stats.tail_instance_median,
            },
            "catalog": {"names": list(catalog.names), "tail_set": sorted(catalog.tail_set)},
            "total_steps": total,
        },
    )
    (out_dir / "config.toml").write_text(config_snapshot_toml(config))
    (out_dir / "metrics.json").write_text(json.dumps(history, indent=2))
    return RunResult(out_dir, ckpt_path, history, stats)
