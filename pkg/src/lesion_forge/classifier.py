"""Downstream binary malignancy classifier with synthetic-mix scheduling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Corpus, ManifestRecord
from .errors import StreamExhaustedError, ValidationError
from .patches import PATCH_SIZE, ImagePatch
from .training import _cached_patch
from . import checkpoint as ckpt

POSITIVE_CLASSES = ("malignant-mass", "malignant-calc")
BACKBONES = ("small-desk-cnn", "reference-residual-50")


@dataclass
class ClassifierConfig:
    backbone: str = "small-desk-cnn"
    pretrained_init: str | None = None
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 1
    total_samples: int = 20000
    initial_synthetic_proportion: float = 0.0
    decay_factor: float = 0.9
    decay_interval: int = 5000
    eval_interval: int = 5000
    desk_width: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValidationError(f"backbone must be one of {BACKBONES}")
        if not 0.0 <= self.initial_synthetic_proportion <= 1.0:
            raise ValidationError("initial_synthetic_proportion must be in [0, 1]")
        if self.decay_interval <= 0 or self.eval_interval <= 0:
            raise ValidationError("decay_interval and eval_interval must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.total_samples < 1:
            raise ValidationError("learning_rate and total_samples must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValidationError("decay_factor must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "pretrained_init": self.pretrained_init,
            "learning_rate": self.learning_rate,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "batch_size": self.batch_size,
            "total_samples": self.total_samples,
            "initial_synthetic_proportion": self.initial_synthetic_proportion,
            "decay_factor": self.decay_factor,
            "decay_interval": self.decay_interval,
            "eval_interval": self.eval_interval,
            "desk_width": self.desk_width,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassifierConfig":
        cfg = ClassifierConfig()
        for key, value in d.items():
            if not hasattr(cfg, key):
                raise ValidationError(f"unknown ClassifierConfig field '{key}'")
            setattr(cfg, key, value)
        cfg.validate()
        return cfg


class SmallDeskCNN(nn.Module):
    """Five stride-2 conv stages, GroupNorm, global average pool, linear head."""

    def __init__(self, width: int = 8):
        super().__init__()
        chans = [width, 2 * width, 4 * width, 4 * width, 8 * width]
        layers: list[nn.Module] = []
        in_ch = 1
        for out_ch in chans:
            layers += [
                nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
                nn.GroupNorm(min(4, out_ch), out_ch),
                nn.ReLU(),
            ]
            in_ch = out_ch
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch, 1)
        self.penultimate_width = in_ch

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)


class ResNet50Backbone(nn.Module):
    """Reference 50-layer residual backbone; grayscale replicated to 3 channels."""

    def __init__(self, pretrained_init: str | None = None):
        super().__init__()
        import torchvision

        self.net = torchvision.models.resnet50(weights=None)
        if pretrained_init:
            state = torch.load(pretrained_init, map_location="cpu")
            self.net.load_state_dict(state, strict=False)
        self.net.fc = nn.Identity()
        self.head = nn.Linear(2048, 1)
        self.penultimate_width = 2048

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x.repeat(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)


def build_backbone(cfg: ClassifierConfig) -> nn.Module:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    if cfg.backbone == "small-desk-cnn":
        model = SmallDeskCNN(width=cfg.desk_width)
        if cfg.pretrained_init:
            state = torch.load(cfg.pretrained_init, map_location="cpu")
            model.load_state_dict(state, strict=False)
        return model
    return ResNet50Backbone(pretrained_init=cfg.pretrained_init)


def mix_probability(step: int, p0: float, cfg: ClassifierConfig) -> float:
    """Synthetic-draw probability after multiplicative decay per interval."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    return p0 * cfg.decay_factor ** (step // cfg.decay_interval)


class ExampleDrawer:
    """Lazy per-(provenance, class) index over the real and synthetic corpora."""

    def __init__(self, real: Corpus, synthetic: Corpus | None, split: str = "train"):
        self.split = split
        self._corpora = {"real": real, "synthetic": synthetic}
        self._index: dict[tuple[str, str], list[ManifestRecord]] = {}
        self.reads = {"real": 0, "synthetic": 0}

    def _records(self, provenance: str, polarity: str) -> tuple[list, list[ManifestRecord]]:
        corpus = self._corpora[provenance]
        if corpus is None:
            raise StreamExhaustedError(f"no corpus for provenance '{provenance}'")
        classes = POSITIVE_CLASSES if polarity == "positive" else ("normal",)
        available = []
        for cls in classes:
            key = (provenance, cls)
            if key not in self._index:
                self._index[key] = corpus.select(
                    split=self.split, label_class=cls, provenance=provenance
                )
            if self._index[key]:
                available.append(cls)
        if not available:
            raise StreamExhaustedError(
                f"empty training cell: provenance={provenance} polarity={polarity}"
            )
        return available, corpus

    def draw(self, p: float, rng: np.random.Generator) -> tuple[ImagePatch, int]:
        polarity = "positive" if rng.uniform() < 0.5 else "negative"
        provenance = "synthetic" if rng.uniform() < p else "real"
        classes, corpus = self._records(provenance, polarity)
        cls = classes[int(rng.integers(0, len(classes)))]
        records = self._index[(provenance, cls)]
        record = records[int(rng.integers(0, len(records)))]
        self.reads[provenance] += 1
        pixels = _cached_patch(str(corpus.image_path(record)))
        patch = ImagePatch(
            pixels=pixels, label_class=cls, provenance=provenance, source_id=record.id
        )
        return patch, 1 if polarity == "positive" else 0


def draw_training_example(
    real: Corpus, synthetic: Corpus | None, p: float, rng: np.random.Generator,
    split: str = "train",
) -> tuple[ImagePatch, int]:
    return ExampleDrawer(real, synthetic, split).draw(p, rng)


def binary_label(record: ManifestRecord) -> int:
    return 1 if record.label_class in POSITIVE_CLASSES else 0


def predict_score(model: nn.Module, patch: ImagePatch) -> float:
    """Malignancy probability for one patch, deterministic in eval mode."""
    if patch.pixels.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ValidationError("patch must be 256x256")
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(patch.pixels).reshape(1, 1, PATCH_SIZE, PATCH_SIZE)
        return float(torch.sigmoid(model(x)))


def score_corpus(model: nn.Module, corpus: Corpus, split: str) -> list[tuple[str, int, float]]:
    """(id, binary label, score) for every patch in a split, batched for speed."""
    model.eval()
    records = corpus.select(split=split)
    out: list[tuple[str, int, float]] = []
    batch_records: list[ManifestRecord] = []

    def flush() -> None:
        if not batch_records:
            return
        arrays = [_cached_patch(str(corpus.image_path(r))) for r in batch_records]
        x = torch.from_numpy(np.stack(arrays)[:, None, :, :])
        with torch.no_grad():
            scores = torch.sigmoid(model(x)).reshape(-1)
        for r, s in zip(batch_records, scores):
            out.append((r.id, binary_label(r), float(s)))
        batch_records.clear()

    for record in records:
        batch_records.append(record)
        if len(batch_records) == 32:
            flush()
    flush()
    return out


def train_classifier(
    cfg: ClassifierConfig,
    real: Corpus,
    synthetic: Corpus | None,
    val: Corpus,
    out_dir: Path,
) -> tuple[Path, list[dict]]:
    """Single-sample-step training with periodic validation-AUC checkpointing."""
    from .metrics import compute_auc_from_pairs

    cfg.validate()
    for record in val.select(split="val"):
        if record.provenance != "real":
            raise ValidationError("validation corpus must be all-real")
    p0 = cfg.initial_synthetic_proportion
    if p0 > 0 and synthetic is None:
        raise ValidationError("synthetic corpus required when initial proportion > 0")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = build_backbone(cfg)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
    )
    drawer = ExampleDrawer(real, synthetic, split="train")

    history: list[dict] = []
    best_state: dict | None = None
    best_auc = -1.0
    best_samples = 0
    running_loss = 0.0
    running_count = 0

    samples_seen = 0
    while samples_seen < cfg.total_samples:
        batch = min(cfg.batch_size, cfg.total_samples - samples_seen)
        patches, labels = [], []
        for _ in range(batch):
            p = mix_probability(samples_seen + len(patches), p0, cfg)
            patch, label = drawer.draw(p, rng)
            patches.append(patch.pixels)
            labels.append(label)
        x = torch.from_numpy(np.stack(patches)[:, None, :, :])
        y = torch.tensor(labels, dtype=torch.float32)
        model.train()
        logits = model(x).reshape(-1)
        loss = F.binary_cross_entropy_with_logits(logits, y)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            ckpt.save_classifier_checkpoint(
                out_dir / "diagnostic.ckpt", model, cfg, samples_seen, optimizer
            )
            raise ValidationError(
                f"non-finite classifier loss at sample {samples_seen}; diagnostics saved"
            )
        running_loss += loss_value * batch
        running_count += batch
        prev = samples_seen
        samples_seen += batch

        if prev // cfg.eval_interval != samples_seen // cfg.eval_interval or (
            samples_seen == cfg.total_samples
        ):
            scored = score_corpus(model, val, split="val")
            val_auc = compute_auc_from_pairs(
                [lab for _, lab, _ in scored], [s for _, _, s in scored]
            )
            history.append(
                {
                    "samples_seen": samples_seen,
                    "p": mix_probability(samples_seen, p0, cfg),
                    "train_loss": running_loss / max(running_count, 1),
                    "val_auc": val_auc,
                }
            )
            running_loss = 0.0
            running_count = 0
            if val_auc > best_auc:
                best_auc = val_auc
                best_samples = samples_seen
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if best_state is None:
        raise ValidationError("training produced no evaluations; lower eval_interval")
    model.load_state_dict(best_state)
    best_path = out_dir / "best.ckpt"
    ckpt.save_classifier_checkpoint(
        best_path, model, cfg, best_samples, extra={"val_auc": best_auc}
    )
    with open(out_dir / "history.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["samples_seen", "p", "train_loss", "val_auc"])
        writer.writeheader()
        writer.writerows(history)
    return best_path, history
