"""Procedural twin-domain dataset: shared scene geometry, two rendering styles.

A scene seed fully determines the label geometry; the domain only selects the
rendering style (palette, tone curve, noise texture). The source style uses a
warm flat palette, the target style pushes every color through one global
channel-mixing tone map plus different noise, so the two domains share content
while their appearance differs everywhere.

Head classes (ground, sky, building, foliage, road) tile the scene; tail
classes (pole, sign, rider) are small sparse objects, giving the long-tailed
pixel distribution the training recipes rely on.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import (
    ClassCatalog,
    Image,
    LabelMap,
    count_class_instances,
    load_image_png,
    load_label_png,
    onehot_encode,
    save_image_png,
    save_label_png,
)
from .errors import (
    ContractError,
    DatasetIntegrityError,
    EmptyDatasetError,
    InvalidSpecError,
)

CLASS_GROUND, CLASS_SKY, CLASS_BUILDING, CLASS_FOLIAGE, CLASS_ROAD = 0, 1, 2, 3, 4
CLASS_POLE, CLASS_SIGN, CLASS_RIDER = 5, 6, 7

TOY_CLASS_NAMES = (
    "ground",
    "sky",
    "building",
    "foliage",
    "road",
    "pole",
    "sign",
    "rider",
)

# pole-like content is only worth transferring when sign-like content
# co-occurs with it (toy analog of poles carrying signs)
DEFAULT_COOCCURRENCE = ((CLASS_POLE, frozenset({CLASS_SIGN})),)

_SOURCE_PALETTE = np.array(
    [
        [0.46, 0.33, 0.18],  # ground
        [0.56, 0.75, 0.94],  # sky
        [0.56, 0.56, 0.58],  # building
        [0.18, 0.52, 0.24],  # foliage
        [0.30, 0.30, 0.33],  # road
        [0.38, 0.30, 0.22],  # pole
        [0.82, 0.26, 0.20],  # sign
        [0.22, 0.28, 0.58],  # rider
    ]
)

# one global color transform separates the domains: channel mixing + gamma
_MIX = np.array(
    [
        [0.15, 0.10, 0.75],
        [0.10, 0.60, 0.30],
        [0.65, 0.25, 0.10],
    ]
)
_TONE_GAMMA = 0.85

_NOISE_SIGMA = {"source": 0.020, "target": 0.030}
_BAND_AMPLITUDE = {"source": 0.0, "target": 0.025}


def toy_catalog() -> ClassCatalog:
    """Default 8-class catalog with pole/sign/rider as tail classes."""
    return ClassCatalog(
        names=TOY_CLASS_NAMES,
        tail_set=frozenset({CLASS_POLE, CLASS_SIGN, CLASS_RIDER}),
    )


def save_catalog_json(catalog: ClassCatalog, path) -> None:
    doc = {"names": list(catalog.names), "tail_set": sorted(catalog.tail_set)}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_catalog_json(path) -> ClassCatalog:
    try:
        doc = json.loads(Path(path).read_text())
        return ClassCatalog(names=tuple(doc["names"]), tail_set=frozenset(doc["tail_set"]))
    except (KeyError, ValueError) as exc:
        raise DatasetIntegrityError(f"cannot parse catalog file {path}: {exc}") from exc


def target_tone(rgb: np.ndarray) -> np.ndarray:
    """Global source-to-target color map applied to the base palette."""
    mixed = np.clip(np.asarray(rgb) @ _MIX.T, 0.0, 1.0)
    return np.clip(mixed**_TONE_GAMMA, 0.0, 1.0)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    resolution: tuple
    domain: str
    catalog: ClassCatalog

    def __post_init__(self):
        h, w = self.resolution
        if h < 8 or w < 8:
            raise InvalidSpecError(f"resolution must be at least 8x8, got {h}x{w}")
        if h % 2 or w % 2:
            raise InvalidSpecError(f"resolution must be even, got {h}x{w}")
        if self.domain not in ("source", "target"):
            raise InvalidSpecError(f"domain must be source or target, got {self.domain!r}")


@dataclass(frozen=True)
class DatasetStats:
    """Per-class pixel totals and the median per-image tail instance count."""

    pixel_counts: np.ndarray
    tail_instance_median: int

    def to_json(self, catalog: ClassCatalog) -> str:
        doc = {
            "pixel_counts": [int(c) for c in self.pixel_counts],
            "tail_instance_median": int(self.tail_instance_median),
            "class_names": list(catalog.names),
        }
        return json.dumps(doc, indent=2)


def _disc(labels, cy, cx, radius, value):
    h, w = labels.shape
    yy, xx = np.ogrid[:h, :w]
    labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = value


def _ellipse(labels, cy, cx, ry, rx, value):
    h, w = labels.shape
    yy, xx = np.ogrid[:h, :w]
    inside = ((yy - cy) / max(ry, 1e-9)) ** 2 + ((xx - cx) / max(rx, 1e-9)) ** 2 <= 1.0
    labels[inside] = value


_TAIL_BUDGET_FRACTION = 0.045
_TAIL_CLASSES = (CLASS_POLE, CLASS_SIGN, CLASS_RIDER)


def _tail_pixels(labels) -> int:
    return int(np.isin(labels, _TAIL_CLASSES).sum())


def _paint_tail(labels, paint):
    """Apply a tail-object painter unless it would bust the tail pixel budget."""
    budget = int(labels.size * _TAIL_BUDGET_FRACTION)
    scratch = labels.copy()
    paint(scratch)
    if _tail_pixels(scratch) <= budget:
        labels[:] = scratch
        return True
    return False


def _scene_geometry(seed: int, h: int, w: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    labels = np.full((h, w), CLASS_GROUND, dtype=np.int64)

    horizon = int(round(h * rng.uniform(0.50, 0.66)))
    labels[:horizon] = CLASS_SKY

    below = h - horizon
    road_top = horizon + int(round(below * rng.uniform(0.15, 0.35)))
    road_thick = max(2, int(round(below * rng.uniform(0.20, 0.40))))
    labels[road_top : road_top + road_thick] = CLASS_ROAD

    for _ in range(rng.integers(1, 4)):
        bw = max(3, int(round(w * rng.uniform(0.12, 0.30))))
        bh = max(3, int(round(h * rng.uniform(0.20, 0.45))))
        x0 = int(rng.integers(0, max(1, w - bw)))
        labels[max(0, horizon - bh) : horizon, x0 : x0 + bw] = CLASS_BUILDING

    for _ in range(rng.integers(0, 3)):
        ry = max(2, int(round(h * rng.uniform(0.05, 0.11))))
        rx = max(2, int(round(w * rng.uniform(0.06, 0.13))))
        cy = horizon - int(rng.integers(0, max(1, ry)))
        cx = int(rng.integers(0, w))
        _ellipse(labels, cy, cx, ry, rx, CLASS_FOLIAGE)

    # tail objects: resolution-relative sizes, capped by a hard pixel budget
    # so the label histogram stays long-tailed at every resolution
    suppress_signs = rng.random() < 0.25
    for _ in range(rng.integers(0, 4)):
        x = int(rng.integers(1, w - 2))
        wp = 1 if w < 48 else int(rng.integers(1, 3))
        top = max(0, horizon - int(round(h * rng.uniform(0.16, 0.28))))
        bottom = horizon + int(round(below * rng.uniform(0.05, 0.30)))
        with_sign = not suppress_signs and rng.random() < 0.75
        sign_r = w * rng.uniform(0.019, 0.034)

        def paint(arr, x=x, wp=wp, top=top, bottom=bottom, with_sign=with_sign, r=sign_r):
            arr[top:bottom, x : x + wp] = CLASS_POLE
            if with_sign:
                _disc(arr, top, x, r, CLASS_SIGN)

        _paint_tail(labels, paint)

    if not suppress_signs:
        for _ in range(rng.integers(0, 3)):
            r = w * rng.uniform(0.019, 0.034)
            cy = int(rng.integers(max(1, horizon // 3), horizon))
            cx = int(rng.integers(0, w))
            _paint_tail(labels, lambda arr, cy=cy, cx=cx, r=r: _disc(arr, cy, cx, r, CLASS_SIGN))

    for _ in range(rng.integers(0, 4)):
        ry = h * rng.uniform(0.025, 0.045)
        rx = w * rng.uniform(0.017, 0.032)
        cy = int(rng.integers(horizon + 1, h - 1))
        cx = int(rng.integers(1, w - 1))
        _paint_tail(
            labels,
            lambda arr, cy=cy, cx=cx, ry=ry, rx=rx: _ellipse(arr, cy, cx, ry, rx, CLASS_RIDER),
        )

    return labels


def _render(labels: np.ndarray, domain: str, seed: int) -> np.ndarray:
    h, w = labels.shape
    rng = np.random.default_rng((seed, 7919, 0 if domain == "source" else 1))

    palette = _SOURCE_PALETTE if domain == "source" else target_tone(_SOURCE_PALETTE)
    palette = palette * rng.uniform(0.94, 1.06)
    palette = palette + rng.uniform(-0.025, 0.025, size=(palette.shape[0], 1))

    img = palette[labels]
    if _BAND_AMPLITUDE[domain]:
        phase = rng.uniform(0.0, 2 * np.pi)
        band = _BAND_AMPLITUDE[domain] * np.sin(
            np.linspace(0.0, 6 * np.pi, h) + phase
        )
        img = img + band[:, None, None]
    img = img + rng.normal(0.0, _NOISE_SIGMA[domain], size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_scene(spec: SceneSpec) -> tuple:
    """Deterministic (Image, LabelMap) pair for a scene spec."""
    h, w = spec.resolution
    labels = _scene_geometry(spec.seed, h, w)
    pixels = _render(labels, spec.domain, spec.seed)
    return Image(pixels, spec.domain), onehot_encode(labels, spec.catalog)


def save_dataset(root, items) -> None:
    """Write (Image, LabelMap) pairs in the images/ + labels/ layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i, (image, label) in enumerate(items):
        stem = f"{i:05d}"
        save_image_png(image, root / "images" / f"{stem}.png")
        save_label_png(label.to_indices(), root / "labels" / f"{stem}.png")


def load_labeled_dataset(root, catalog: ClassCatalog, domain_tag: str = "source"):
    """Load (Image, LabelMap) pairs in lexicographic stem order."""
    root = Path(root)
    img_dir, lbl_dir = root / "images", root / "labels"
    if not img_dir.is_dir() or not lbl_dir.is_dir():
        raise DatasetIntegrityError(f"{root} must contain images/ and labels/")
    img_stems = {p.stem: p for p in img_dir.glob("*.png")}
    lbl_stems = {p.stem: p for p in lbl_dir.glob("*.png")}
    for stem in sorted(set(img_stems) ^ set(lbl_stems)):
        kind = "label" if stem in img_stems else "image"
        raise DatasetIntegrityError(f"stem {stem!r} is missing its {kind} file")
    items = []
    for stem in sorted(img_stems):
        image = load_image_png(img_stems[stem], domain_tag)
        label = onehot_encode(load_label_png(lbl_stems[stem]), catalog)
        items.append((image, label))
    return items


def compute_stats(dataset, catalog: ClassCatalog) -> DatasetStats:
    """Class pixel totals plus the median per-image tail instance count.

    Instances are 4-connected components counted per tail class; the median
    of an even-length list is the lower middle value.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot compute statistics of an empty dataset")
    k = catalog.num_classes
    counts = np.zeros(k, dtype=np.int64)
    per_image = []
    for _, label in dataset:
        if label.num_classes != k:
            raise ContractError("label map class count does not match catalog")
        counts += label.onehot.reshape(-1, k).sum(axis=0, dtype=np.int64)
        per_image.append(count_class_instances(label, catalog.tail_set))
    per_image.sort()
    median = per_image[(len(per_image) - 1) // 2]
    return DatasetStats(pixel_counts=counts, tail_instance_median=int(median))
