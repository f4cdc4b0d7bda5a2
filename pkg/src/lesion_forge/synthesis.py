"""Synthetic-example construction: lesion-channel post-processing and corpora.

Pipeline per accepted example: threshold the lesion channel, keep the largest
connected component, reject undersized objects, dilate, feather, mask the
lesion, and add it to the base patch. Removal runs the same steps with a
negative threshold so the masked "negative lesion" darkens the input.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .corpus import Corpus, ManifestRecord
from .errors import SynthesisFailureError, ValidationError
from .networks import Generator, NoiseDraw, generate_triplet
from .patches import PATCH_SIZE, ImagePatch, SamplerConfig, sample_lesion_patch, sample_normal_patch
from .phantom import load_full_image
from .seeding import derive_seed

logger = logging.getLogger(__name__)

KIND_TO_CLASS = {"mass": "malignant-mass", "calc": "malignant-calc"}


@dataclass
class PostprocessConfig:
    threshold: float = 0.1  # negative for removal
    min_area_fraction: float = 0.10
    dilation_radius: int = 5
    feather_radius: int = 10
    connectivity: int = 8
    max_regen_attempts: int = 25

    def validate(self) -> None:
        if self.threshold == 0.0:
            raise ValidationError("threshold must be nonzero (sign selects the comparison)")
        if not 0 < self.min_area_fraction < 1:
            raise ValidationError("min_area_fraction must be in (0, 1)")
        if self.dilation_radius <= 0 or self.feather_radius <= 0:
            raise ValidationError("dilation_radius and feather_radius must be positive")
        if self.connectivity not in (4, 8):
            raise ValidationError("connectivity must be 4 or 8")
        if self.max_regen_attempts < 1:
            raise ValidationError("max_regen_attempts must be >= 1")

    @staticmethod
    def removal(**overrides) -> "PostprocessConfig":
        cfg = PostprocessConfig(threshold=-0.1)
        return replace(cfg, **overrides)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "min_area_fraction": self.min_area_fraction,
            "dilation_radius": self.dilation_radius,
            "feather_radius": self.feather_radius,
            "connectivity": self.connectivity,
            "max_regen_attempts": self.max_regen_attempts,
        }

    @staticmethod
    def from_dict(d: dict) -> "PostprocessConfig":
        cfg = PostprocessConfig()
        for key, value in d.items():
            if not hasattr(cfg, key):
                raise ValidationError(f"unknown PostprocessConfig field '{key}'")
            setattr(cfg, key, value)
        cfg.validate()
        return cfg


def disk_element(radius: int) -> np.ndarray:
    """Rasterized disk: dx^2 + dy^2 <= r^2."""
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy**2 + xx**2) <= radius**2


def extract_lesion_mask(lesion: np.ndarray, cfg: PostprocessConfig) -> np.ndarray | None:
    """Largest connected component above (or below, for removal) the threshold.

    Returns None when the thresholded mask is empty or the component is
    smaller than the area gate; the caller resamples.
    """
    cfg.validate()
    if cfg.threshold > 0:
        binary = lesion > cfg.threshold
    else:
        binary = lesion < cfg.threshold
    if not binary.any():
        return None
    structure = np.ones((3, 3), dtype=bool) if cfg.connectivity == 8 else None
    labels, count = ndimage.label(binary, structure=structure)
    areas = np.bincount(labels.ravel())[1:]
    largest = int(np.argmax(areas)) + 1
    area = float(areas[largest - 1])
    if area < cfg.min_area_fraction * lesion.size:
        return None
    return labels == largest


def refine_mask(mask: np.ndarray, cfg: PostprocessConfig) -> np.ndarray:
    """Dilate by a disk, then feather the edge with a truncated Gaussian."""
    cfg.validate()
    if not mask.any():
        return np.zeros(mask.shape, dtype=np.float32)
    dilated = ndimage.binary_dilation(mask, structure=disk_element(cfg.dilation_radius))
    sigma = cfg.feather_radius / 3.0
    soft = ndimage.gaussian_filter(
        dilated.astype(np.float64), sigma=sigma, truncate=cfg.feather_radius / sigma,
        mode="constant",
    )
    return np.clip(soft, 0.0, 1.0).astype(np.float32)


def apply_soft_mask(lesion: np.ndarray, soft: np.ndarray, base: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    masked = (soft * lesion).astype(np.float32)
    combined = np.clip(base + masked, -1.0, 1.0).astype(np.float32)
    return masked, combined


def synthesize_patch(
    generator: Generator,
    normal_source: Corpus,
    post_cfg: PostprocessConfig,
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
    lesion_kind: str,
    split: str = "train",
) -> ImagePatch:
    """Steps 1-5: sample context, generate, post-process, composite."""
    if lesion_kind not in KIND_TO_CLASS:
        raise ValidationError(f"lesion_kind must be one of {tuple(KIND_TO_CLASS)}")
    if post_cfg.threshold <= 0:
        raise ValidationError("synthesis requires a positive threshold")
    records = normal_source.select(split=split, label_class="normal")
    if not records:
        raise SynthesisFailureError(f"no normal images in split '{split}'")
    rejections = 0
    for attempt in range(post_cfg.max_regen_attempts):
        record = records[int(rng.integers(0, len(records)))]
        image = load_full_image(normal_source, record)
        base = sample_normal_patch(image, sampler_cfg, rng)
        noise = NoiseDraw.sample(generator.noise_keys(), rng)
        triplet = generate_triplet(generator, base, noise)
        mask = extract_lesion_mask(triplet.lesion, post_cfg)
        if mask is None:
            rejections += 1
            continue
        soft = refine_mask(mask, post_cfg)
        _, combined = apply_soft_mask(triplet.lesion, soft, triplet.base)
        patch = ImagePatch(
            pixels=combined,
            label_class=KIND_TO_CLASS[lesion_kind],
            provenance="synthetic",
            source_id=base.source_id,
        )
        patch.validate()
        return patch
    raise SynthesisFailureError(
        f"synthesis of a {lesion_kind} patch failed: "
        f"{rejections} mask rejections in {post_cfg.max_regen_attempts} attempts"
    )


def remove_lesion_patch(
    removal_generator: Generator,
    malignant_patch: ImagePatch,
    post_cfg: PostprocessConfig,
    rng: np.random.Generator,
) -> ImagePatch:
    """Negative-threshold pipeline: the masked negative lesion darkens the input."""
    if post_cfg.threshold >= 0:
        raise ValidationError("removal requires a negative threshold")
    malignant_patch.validate()
    rejections = 0
    for attempt in range(post_cfg.max_regen_attempts):
        noise = NoiseDraw.sample(removal_generator.noise_keys(), rng)
        triplet = generate_triplet(removal_generator, malignant_patch, noise)
        mask = extract_lesion_mask(triplet.lesion, post_cfg)
        if mask is None:
            rejections += 1
            continue
        soft = refine_mask(mask, post_cfg)
        _, combined = apply_soft_mask(triplet.lesion, soft, triplet.base)
        if combined[mask].mean() > malignant_patch.pixels[mask].mean():
            raise ValidationError("negative lesion raised intensity inside its mask")
        patch = ImagePatch(
            pixels=combined,
            label_class="normal",
            provenance="synthetic",
            source_id=malignant_patch.source_id,
        )
        patch.validate()
        return patch
    raise SynthesisFailureError(
        f"lesion removal failed: {rejections} mask rejections "
        f"in {post_cfg.max_regen_attempts} attempts"
    )


def build_synthetic_corpus(
    generators: dict[str, tuple[Generator, str]],
    image_corpus: Corpus,
    sampler_cfg: SamplerConfig,
    post_cfgs: dict[str, PostprocessConfig],
    counts: dict[str, int],
    seed: int,
    out_root: Path,
    split: str = "train",
) -> Corpus:
    """Synthesize counts[kind] patches per kind into a provenance=synthetic corpus.

    generators maps kind -> (generator, checkpoint hash); kinds are
    "mass", "calc" (synthesis) and "normal" (lesion removal).
    """
    out = Corpus(Path(out_root))
    failures = 0
    attempts = 0
    malignant_records = [
        r
        for cls in ("malignant-mass", "malignant-calc")
        for r in image_corpus.select(split=split, label_class=cls)
        if r.boxes
    ]

    for kind in ("mass", "calc", "normal"):
        count = counts.get(kind, 0)
        if count == 0:
            continue
        if kind not in generators:
            raise ValidationError(f"no generator supplied for kind '{kind}'")
        generator, ckpt_hash = generators[kind]
        post_cfg = post_cfgs[kind]
        label_class = KIND_TO_CLASS.get(kind, "normal")
        for i in range(count):
            example_seed = derive_seed(seed, "synthetic", kind, i)
            patch = None
            for retry in range(5):
                attempts += 1
                rng = np.random.default_rng(derive_seed(example_seed, retry))
                try:
                    if kind == "normal":
                        if not malignant_records:
                            raise SynthesisFailureError("no malignant source images for removal")
                        record = malignant_records[int(rng.integers(0, len(malignant_records)))]
                        image = load_full_image(image_corpus, record)
                        source = sample_lesion_patch(image, sampler_cfg, rng)
                        patch = remove_lesion_patch(generator, source, post_cfg, rng)
                    else:
                        patch = synthesize_patch(
                            generator, image_corpus, post_cfg, sampler_cfg, rng, kind, split
                        )
                    break
                except SynthesisFailureError as exc:
                    failures += 1
                    logger.warning("synthesis retry %d for %s[%d]: %s", retry, kind, i, exc)
            if patch is None:
                raise SynthesisFailureError(
                    f"persistent synthesis failure for {kind}[{i}] after 5 regenerations"
                )
            record = ManifestRecord(
                id=f"syn-{kind}-{i:06d}",
                label_class=label_class,
                split=split,
                seed=example_seed,
                provenance="synthetic",
                extra={"generator": ckpt_hash, "source": patch.source_id},
            )
            out.add_patch(record, patch.pixels)
    out.save_manifest()
    stats = {
        "attempts": attempts,
        "failures": failures,
        "failure_rate": failures / attempts if attempts else 0.0,
    }
    with open(Path(out_root) / "synthesis_stats.json", "w") as fh:
        json.dump(stats, fh, sort_keys=True)
    logger.info("synthetic corpus complete: %s", stats)
    return out
