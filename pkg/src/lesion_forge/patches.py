"""256x256 patch extraction with tissue, offset, and augmentation rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .corpus import UINT16_MAX, Corpus, ManifestRecord
from .errors import NoValidPatchError, ValidationError
from .phantom import BACKGROUND_FLOOR, FullImage, load_full_image
from .seeding import derive_seed

PATCH_SIZE = 256

# Background floor expressed in normalized [-1, 1] patch space.
NORMALIZED_FLOOR = BACKGROUND_FLOOR / UINT16_MAX * 2.0 - 1.0


@dataclass
class ImagePatch:
    pixels: np.ndarray  # float32 (256, 256) in [-1, 1]
    label_class: str
    provenance: str = "real"
    source_id: str = ""

    def validate(self) -> None:
        if self.pixels.shape != (PATCH_SIZE, PATCH_SIZE):
            raise ValidationError(f"patch shape {self.pixels.shape} != ({PATCH_SIZE}, {PATCH_SIZE})")
        if self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
            raise ValidationError("patch pixel values outside [-1, 1]")


@dataclass
class SamplerConfig:
    tissue_fraction_min: float = 0.9
    max_offset: int = 128
    scale_range: tuple[float, float] = (0.8, 1.2)
    max_retries: int = 100
    flip_probability: float = 0.5

    def validate(self) -> None:
        if not 0 < self.tissue_fraction_min <= 1:
            raise ValidationError("tissue_fraction_min must be in (0, 1]")
        if not 0 <= self.max_offset <= PATCH_SIZE // 2:
            raise ValidationError(f"max_offset must be in [0, {PATCH_SIZE // 2}]")
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ValidationError("scale_range must be a positive (lo, hi) range")
        if self.max_retries < 1:
            raise ValidationError("max_retries must be >= 1")

    def to_dict(self) -> dict:
        return {
            "tissue_fraction_min": self.tissue_fraction_min,
            "max_offset": self.max_offset,
            "scale_range": list(self.scale_range),
            "max_retries": self.max_retries,
            "flip_probability": self.flip_probability,
        }

    @staticmethod
    def from_dict(d: dict) -> "SamplerConfig":
        cfg = SamplerConfig()
        for key, value in d.items():
            if not hasattr(cfg, key):
                raise ValidationError(f"unknown SamplerConfig field '{key}'")
            if key == "scale_range":
                value = tuple(value)
            setattr(cfg, key, value)
        cfg.validate()
        return cfg


def normalize_intensity(raw: np.ndarray) -> np.ndarray:
    """Affine map of [0, 65535] onto [-1, 1], clipped."""
    if raw.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ValidationError(f"raw window shape {raw.shape} != ({PATCH_SIZE}, {PATCH_SIZE})")
    out = raw.astype(np.float32) * (2.0 / UINT16_MAX) - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def window_tissue_fraction(window: np.ndarray, floor: float = BACKGROUND_FLOOR) -> float:
    return float((window.astype(np.float64) > floor).mean())


def patch_tissue_fraction(pixels: np.ndarray, floor: float = NORMALIZED_FLOOR) -> float:
    return float((pixels > floor).mean())


def _extract(image: FullImage, x: int, y: int, label_class: str | None = None) -> ImagePatch:
    window = image.pixels[y : y + PATCH_SIZE, x : x + PATCH_SIZE]
    return ImagePatch(
        pixels=normalize_intensity(window),
        label_class=label_class or image.label_class,
        provenance="real",
        source_id=f"{image.image_id}@{x},{y}",
    )


def sample_normal_patch(
    image: FullImage, cfg: SamplerConfig, rng: np.random.Generator
) -> ImagePatch:
    """Uniform-over-accepted rejection sampling of a tissue-rich window."""
    h, w = image.pixels.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise NoValidPatchError(f"image {image.image_id} smaller than patch size")
    for _ in range(cfg.max_retries):
        x = int(rng.integers(0, w - PATCH_SIZE + 1))
        y = int(rng.integers(0, h - PATCH_SIZE + 1))
        window = image.pixels[y : y + PATCH_SIZE, x : x + PATCH_SIZE]
        if window_tissue_fraction(window) >= cfg.tissue_fraction_min:
            return _extract(image, x, y)
    raise NoValidPatchError(
        f"no window with tissue fraction >= {cfg.tissue_fraction_min} "
        f"found in image {image.image_id} after {cfg.max_retries} tries"
    )


def sample_lesion_patch(
    image: FullImage, cfg: SamplerConfig, rng: np.random.Generator
) -> ImagePatch:
    """Patch centered on a lesion pixel plus a signed offset; pixel stays contained."""
    if not image.annotations:
        raise NoValidPatchError(f"image {image.image_id} has no lesion annotations")
    h, w = image.pixels.shape
    last: tuple[int, int] | None = None
    for attempt in range(cfg.max_retries):
        box = image.annotations[int(rng.integers(0, len(image.annotations)))]
        px = int(rng.integers(box.x, box.x + box.width))
        py = int(rng.integers(box.y, box.y + box.height))
        dx = int(rng.integers(-cfg.max_offset, cfg.max_offset + 1))
        dy = int(rng.integers(-cfg.max_offset, cfg.max_offset + 1))
        x = int(np.clip(px + dx - PATCH_SIZE // 2, 0, w - PATCH_SIZE))
        y = int(np.clip(py + dy - PATCH_SIZE // 2, 0, h - PATCH_SIZE))
        last = (x, y)
        window = image.pixels[y : y + PATCH_SIZE, x : x + PATCH_SIZE]
        if window_tissue_fraction(window) >= cfg.tissue_fraction_min:
            return _extract(image, x, y)
    # lesion containment takes precedence over the tissue rule once retries run out
    x, y = last  # type: ignore[misc]
    return _extract(image, x, y)


def augment_patch(patch: ImagePatch, cfg: SamplerConfig, rng: np.random.Generator) -> ImagePatch:
    """Random flip, right-angle rotation, and 0.8-1.2x rescale back to 256x256."""
    pixels = patch.pixels
    if rng.uniform() < cfg.flip_probability:
        pixels = np.fliplr(pixels)
    k = int(rng.integers(0, 4))
    if k:
        pixels = np.rot90(pixels, k)
    scale = float(rng.uniform(*cfg.scale_range))
    side = int(round(PATCH_SIZE * scale))
    if side != PATCH_SIZE:
        pixels = cv2.resize(
            np.ascontiguousarray(pixels), (side, side), interpolation=cv2.INTER_LINEAR
        )
        if side > PATCH_SIZE:
            off = (side - PATCH_SIZE) // 2
            pixels = pixels[off : off + PATCH_SIZE, off : off + PATCH_SIZE]
        else:
            before = (PATCH_SIZE - side) // 2
            after = PATCH_SIZE - side - before
            pixels = np.pad(pixels, ((before, after), (before, after)), mode="reflect")
    out = ImagePatch(
        pixels=np.clip(np.ascontiguousarray(pixels), -1.0, 1.0).astype(np.float32),
        label_class=patch.label_class,
        provenance=patch.provenance,
        source_id=patch.source_id,
    )
    out.validate()
    return out


def sample_patch_for_class(
    image: FullImage, label_class: str, cfg: SamplerConfig, rng: np.random.Generator
) -> ImagePatch:
    if label_class == "normal":
        return sample_normal_patch(image, cfg, rng)
    return sample_lesion_patch(image, cfg, rng)


def build_patch_corpus(
    image_corpus: Corpus,
    cfg: SamplerConfig,
    counts: dict[str, dict[str, int]],
    out_root: Path,
    seed: int,
    augment: bool = True,
) -> Corpus:
    """Materialize a patch corpus: counts[split][class] patches per cell."""
    cfg.validate()
    patch_corpus = Corpus(Path(out_root))
    for split, per_class in sorted(counts.items()):
        for label_class, count in sorted(per_class.items()):
            sources = image_corpus.select(split=split, label_class=label_class)
            if label_class != "normal":
                sources = [r for r in sources if r.boxes]
            if count > 0 and not sources:
                raise NoValidPatchError(
                    f"no source images for split={split} class={label_class}"
                )
            for i in range(count):
                rng = np.random.default_rng(derive_seed(seed, "patch", split, label_class, i))
                patch = None
                for _ in range(cfg.max_retries):
                    record = sources[int(rng.integers(0, len(sources)))]
                    image = load_full_image(image_corpus, record)
                    try:
                        candidate = sample_patch_for_class(image, label_class, cfg, rng)
                    except NoValidPatchError:
                        continue
                    if augment:
                        candidate = augment_patch(candidate, cfg, rng)
                        if (
                            label_class == "normal"
                            and patch_tissue_fraction(candidate.pixels) < cfg.tissue_fraction_min
                        ):
                            continue
                    patch = candidate
                    break
                if patch is None:
                    raise NoValidPatchError(
                        f"could not draw patch {i} for split={split} class={label_class}"
                    )
                patch_record = ManifestRecord(
                    id=f"{split}-{label_class}-{i:06d}",
                    label_class=label_class,
                    split=split,
                    seed=int(derive_seed(seed, "patch", split, label_class, i)),
                    provenance="real",
                    extra={"source": patch.source_id},
                )
                patch_corpus.add_patch(patch_record, patch.pixels)
    patch_corpus.save_manifest()
    return patch_corpus
