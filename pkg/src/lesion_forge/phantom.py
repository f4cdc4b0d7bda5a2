"""Procedural phantom corpus: mammogram-like images with known lesion boxes.

Stands in for an access-gated clinical dataset so the full pipeline stays
testable. Everything is a pure function of the spec seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .corpus import LABEL_CLASSES, SPLITS, Corpus, ManifestRecord
from .errors import ValidationError
from .seeding import derive_seed, hash_unit

# Air value outside the tissue region; the tissue predicate for phantom
# images thresholds at exactly this floor.
BACKGROUND_FLOOR = 0

INTENSITY_MAX = 65535


@dataclass
class LesionBox:
    x: int
    y: int
    width: int
    height: int
    lesion_kind: str  # "mass" | "calcification"

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("LesionBox.width/height must be positive")

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "width": self.width,
            "height": self.height,
            "kind": self.lesion_kind,
        }

    @staticmethod
    def from_dict(d: dict) -> "LesionBox":
        return LesionBox(d["x"], d["y"], d["width"], d["height"], d["kind"])


@dataclass
class FullImage:
    pixels: np.ndarray  # 2D uint16
    annotations: list[LesionBox]
    label_class: str
    split: str
    image_id: str = ""

    def validate(self) -> None:
        h, w = self.pixels.shape
        for box in self.annotations:
            box.validate()
            if box.x < 0 or box.y < 0 or box.x + box.width > w or box.y + box.height > h:
                raise ValidationError(f"LesionBox out of bounds in {self.image_id}")
        if self.label_class == "normal" and self.annotations:
            raise ValidationError("normal images must have zero annotations")


def _check_range(name: str, rng: tuple, nonneg: bool = True) -> None:
    if len(rng) != 2 or rng[1] < rng[0]:
        raise ValidationError(f"{name} must be a nonempty (lo, hi) range")
    if nonneg and rng[0] < 0:
        raise ValidationError(f"{name} must be nonnegative")


@dataclass
class PhantomSpec:
    image_width: int = 768
    image_height: int = 768
    texture_smoothing_px: float = 24.0
    texture_intensity_range: tuple[int, int] = (14000, 34000)
    mass_radius_range: tuple[int, int] = (36, 64)
    mass_peak_range: tuple[int, int] = (9000, 20000)
    benign_peak_scale: float = 0.45
    calc_cluster_count_range: tuple[int, int] = (1, 2)
    calc_speck_radius_range: tuple[int, int] = (2, 4)
    calc_speck_count_range: tuple[int, int] = (6, 12)
    counts_per_class: dict[str, int] = field(
        default_factory=lambda: {c: 8 for c in LABEL_CLASSES}
    )
    master_seed: int = 0

    def validate(self) -> None:
        if self.image_width < 320 or self.image_height < 320:
            raise ValidationError("image_width/image_height must be >= 320")
        if self.texture_smoothing_px <= 0:
            raise ValidationError("texture_smoothing_px must be positive")
        _check_range("texture_intensity_range", self.texture_intensity_range)
        if self.texture_intensity_range[0] <= BACKGROUND_FLOOR:
            raise ValidationError("texture_intensity_range must sit above the background floor")
        _check_range("mass_radius_range", self.mass_radius_range)
        _check_range("mass_peak_range", self.mass_peak_range)
        _check_range("calc_cluster_count_range", self.calc_cluster_count_range)
        _check_range("calc_speck_radius_range", self.calc_speck_radius_range)
        _check_range("calc_speck_count_range", self.calc_speck_count_range)
        if not 0 < self.benign_peak_scale <= 1:
            raise ValidationError("benign_peak_scale must be in (0, 1]")
        for cls, count in self.counts_per_class.items():
            if cls not in LABEL_CLASSES:
                raise ValidationError(f"counts_per_class has unknown class '{cls}'")
            if count < 0:
                raise ValidationError(f"counts_per_class[{cls}] must be >= 0")

    def to_dict(self) -> dict:
        return {
            "image_width": self.image_width,
            "image_height": self.image_height,
            "texture_smoothing_px": self.texture_smoothing_px,
            "texture_intensity_range": list(self.texture_intensity_range),
            "mass_radius_range": list(self.mass_radius_range),
            "mass_peak_range": list(self.mass_peak_range),
            "benign_peak_scale": self.benign_peak_scale,
            "calc_cluster_count_range": list(self.calc_cluster_count_range),
            "calc_speck_radius_range": list(self.calc_speck_radius_range),
            "calc_speck_count_range": list(self.calc_speck_count_range),
            "counts_per_class": dict(self.counts_per_class),
            "master_seed": self.master_seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "PhantomSpec":
        spec = PhantomSpec()
        for key, value in d.items():
            if not hasattr(spec, key):
                raise ValidationError(f"unknown PhantomSpec field '{key}'")
            if key.endswith("_range"):
                value = tuple(value)
            setattr(spec, key, value)
        return spec


def tissue_region(width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Breast-like boolean region: a laterally anchored ellipse with a wavy edge."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy = height / 2.0
    a = 0.92 * width
    b = 0.46 * height
    phase = rng.uniform(0, 2 * np.pi)
    wobble = 1.0 + 0.06 * np.sin(2 * np.pi * yy / height * 3.0 + phase)
    return (xx / (a * wobble)) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def render_texture(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed-noise tissue texture inside the breast region; air elsewhere."""
    h, w = spec.image_height, spec.image_width
    noise = rng.uniform(0.0, 1.0, size=(h, w))
    smooth = ndimage.gaussian_filter(noise, sigma=spec.texture_smoothing_px, mode="reflect")
    lo, hi = smooth.min(), smooth.max()
    unit = (smooth - lo) / (hi - lo) if hi > lo else np.zeros_like(smooth)
    t_lo, t_hi = spec.texture_intensity_range
    texture = t_lo + unit * (t_hi - t_lo)
    region = tissue_region(w, h, rng)
    canvas = np.where(region, texture, float(BACKGROUND_FLOOR))
    return canvas.astype(np.float64), region


def render_lesion(canvas: np.ndarray, box: LesionBox, spec: PhantomSpec, seed: int) -> np.ndarray:
    """Additively render one lesion inside its box; pixels outside are untouched."""
    h, w = canvas.shape
    if box.x < 0 or box.y < 0 or box.x + box.width > w or box.y + box.height > h:
        raise ValidationError("LesionBox out of canvas bounds")
    box.validate()
    rng = np.random.default_rng(seed)
    out = canvas.astype(np.float64).copy()
    window = out[box.y : box.y + box.height, box.x : box.x + box.width]
    yy, xx = np.mgrid[0 : box.height, 0 : box.width].astype(np.float64)

    if box.lesion_kind == "mass":
        radius = min(box.width, box.height) / 2.0
        peak = rng.uniform(*spec.mass_peak_range)
        cy, cx = (box.height - 1) / 2.0, (box.width - 1) / 2.0
        d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / max(radius, 1.0) ** 2
        window += peak * np.exp(-4.0 * d2)
    elif box.lesion_kind == "calcification":
        count = int(rng.integers(spec.calc_speck_count_range[0], spec.calc_speck_count_range[1] + 1))
        peak = rng.uniform(*spec.mass_peak_range)
        max_r = spec.calc_speck_radius_range[1]
        centers: list[tuple[float, float]] = []
        attempts = 0
        while len(centers) < count and attempts < 200 * count:
            attempts += 1
            cy = rng.uniform(max_r + 1, box.height - max_r - 2)
            cx = rng.uniform(max_r + 1, box.width - max_r - 2)
            # keep specks separated so each stays a distinct local maximum
            if all((cy - oy) ** 2 + (cx - ox) ** 2 >= (3.0 * max_r) ** 2 for oy, ox in centers):
                centers.append((cy, cx))
        for cy, cx in centers:
            r = rng.uniform(*spec.calc_speck_radius_range)
            d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / max(r, 1.0) ** 2
            window += peak * np.exp(-3.0 * d2)
    else:
        raise ValidationError(f"unknown lesion kind '{box.lesion_kind}'")

    np.clip(out, BACKGROUND_FLOOR, INTENSITY_MAX, out=out)
    return out


def tissue_mask(image: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Boolean tissue mask: intensity above a floor (phantom) or Otsu (real)."""
    if threshold is None:
        as8 = (image.astype(np.float64) / 257.0).astype(np.uint8)
        otsu, _ = cv2.threshold(as8, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
        threshold = otsu * 257.0
    return image.astype(np.float64) > float(threshold)


def tissue_fraction(image: np.ndarray, threshold: float | None = BACKGROUND_FLOOR) -> float:
    return float(tissue_mask(image, threshold).mean())


def _place_box(
    region: np.ndarray, side: int, rng: np.random.Generator, max_tries: int = 200
) -> tuple[int, int] | None:
    """Top-left corner for a side x side box fully inside the tissue region."""
    h, w = region.shape
    eroded = ndimage.binary_erosion(region, iterations=4)
    for _ in range(max_tries):
        y = int(rng.integers(0, max(h - side, 1)))
        x = int(rng.integers(0, max(w - side, 1)))
        if eroded[y : y + side, x : x + side].all():
            return x, y
    # fall back to a box around the region centroid, clamped into bounds
    ys, xs = np.nonzero(eroded if eroded.any() else region)
    if len(ys) == 0:
        return None
    cy, cx = int(ys.mean()), int(xs.mean())
    y = int(np.clip(cy - side // 2, 0, h - side))
    x = int(np.clip(cx - side // 2, 0, w - side))
    return x, y


def _split_for(master_seed: int, label_class: str, index: int) -> str:
    u = hash_unit(master_seed, "split", label_class, index)
    if u < 0.6:
        return "train"
    if u < 0.8:
        return "val"
    return "test"


def render_phantom_image(spec: PhantomSpec, label_class: str, seed: int) -> FullImage:
    """Render one full phantom image of the given class from its seed."""
    rng = np.random.default_rng(seed)
    canvas, region = render_texture(spec, rng)
    boxes: list[LesionBox] = []

    if label_class in ("benign", "malignant-mass"):
        radius = int(rng.integers(spec.mass_radius_range[0], spec.mass_radius_range[1] + 1))
        side = 2 * radius + 1
        spot = _place_box(region, side, rng)
        if spot is not None:
            kind_seed = derive_seed(seed, "mass", 0)
            box = LesionBox(spot[0], spot[1], side, side, "mass")
            if label_class == "benign":
                benign_spec = replace(
                    spec,
                    mass_peak_range=(
                        int(spec.mass_peak_range[0] * spec.benign_peak_scale),
                        int(spec.mass_peak_range[1] * spec.benign_peak_scale),
                    ),
                )
                canvas = render_lesion(canvas, box, benign_spec, kind_seed)
            else:
                canvas = render_lesion(canvas, box, spec, kind_seed)
            boxes.append(box)
    elif label_class == "malignant-calc":
        clusters = int(
            rng.integers(spec.calc_cluster_count_range[0], spec.calc_cluster_count_range[1] + 1)
        )
        side = 8 * spec.calc_speck_radius_range[1] + 48
        for ci in range(clusters):
            spot = _place_box(region, side, rng)
            if spot is None:
                continue
            box = LesionBox(spot[0], spot[1], side, side, "calcification")
            canvas = render_lesion(canvas, box, spec, derive_seed(seed, "calc", ci))
            boxes.append(box)

    image = FullImage(
        pixels=np.round(canvas).astype(np.uint16),
        annotations=boxes,
        label_class=label_class,
        split="train",
        image_id="",
    )
    return image


def generate_phantom_corpus(spec: PhantomSpec, out_root: Path) -> Corpus:
    """Write the full deterministic corpus described by the spec."""
    spec.validate()
    corpus = Corpus(Path(out_root))
    for label_class in LABEL_CLASSES:
        count = spec.counts_per_class.get(label_class, 0)
        for index in range(count):
            seed = derive_seed(spec.master_seed, "image", label_class, index)
            image = render_phantom_image(spec, label_class, seed)
            image.split = _split_for(spec.master_seed, label_class, index)
            image.image_id = f"{label_class}-{index:05d}"
            image.validate()
            record = ManifestRecord(
                id=image.image_id,
                label_class=label_class,
                split=image.split,
                boxes=[b.to_dict() for b in image.annotations],
                seed=seed,
            )
            corpus.add(record, image.pixels)
    corpus.save_manifest()
    return corpus


def load_full_image(corpus: Corpus, record: ManifestRecord) -> FullImage:
    return FullImage(
        pixels=corpus.load_pixels(record),
        annotations=[LesionBox.from_dict(b) for b in record.boxes],
        label_class=record.label_class,
        split=record.split,
        image_id=record.id,
    )
