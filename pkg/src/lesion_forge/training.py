"""Semi-supervised adversarial training with gradient penalty and growing.

The discriminator sees one batch per class slot each update step; benign and
normal terms are down-scaled. Stage schedules fade new resolution layers in
linearly over a fixed number of discriminator iterations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Corpus
from .errors import StreamExhaustedError, ValidationError
from .networks import Discriminator, Generator, NetworkSpec, NoiseDraw
from . import checkpoint as ckpt

TASKS = ("mass", "calc", "removal")


@dataclass
class GanTrainConfig:
    learning_rate: float = 1e-5
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_epsilon: float = 1e-8
    gp_lambda: float = 10.0
    gp_k: float = 1.0
    perturbation_scale: float = 0.5
    aux_loss_scale: float = 0.2
    g_steps_per_d: int = 1
    fade_iterations: int = 3000
    stage_resolutions: tuple[int, ...] = (128, 256)
    stage_iterations: tuple[int, ...] | None = None
    batch_size: int = 4
    total_iterations: int = 6000
    checkpoint_interval: int = 0  # 0: only stage-end checkpoints
    seed: int = 0

    def validate(self) -> None:
        for name in ("learning_rate", "adam_epsilon", "gp_lambda"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not 0 < self.aux_loss_scale <= 1:
            raise ValidationError("aux_loss_scale must be in (0, 1]")
        if self.fade_iterations < 1:
            raise ValidationError("fade_iterations must be >= 1")
        if self.g_steps_per_d < 1 or self.batch_size < 1 or self.total_iterations < 1:
            raise ValidationError("g_steps_per_d, batch_size, total_iterations must be >= 1")
        for prev, cur in zip(self.stage_resolutions, self.stage_resolutions[1:]):
            if cur != 2 * prev:
                raise ValidationError("stage_resolutions must double at each stage")
        if self.stage_iterations is not None and len(self.stage_iterations) != len(
            self.stage_resolutions
        ):
            raise ValidationError("stage_iterations must align with stage_resolutions")

    def per_stage_iterations(self) -> list[int]:
        if self.stage_iterations is not None:
            return list(self.stage_iterations)
        n = len(self.stage_resolutions)
        base = self.total_iterations // n
        out = [base] * n
        out[-1] += self.total_iterations - base * n
        return out

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_epsilon": self.adam_epsilon,
            "gp_lambda": self.gp_lambda,
            "gp_k": self.gp_k,
            "perturbation_scale": self.perturbation_scale,
            "aux_loss_scale": self.aux_loss_scale,
            "g_steps_per_d": self.g_steps_per_d,
            "fade_iterations": self.fade_iterations,
            "stage_resolutions": list(self.stage_resolutions),
            "stage_iterations": list(self.stage_iterations) if self.stage_iterations else None,
            "batch_size": self.batch_size,
            "total_iterations": self.total_iterations,
            "checkpoint_interval": self.checkpoint_interval,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "GanTrainConfig":
        cfg = GanTrainConfig()
        for key, value in d.items():
            if not hasattr(cfg, key):
                raise ValidationError(f"unknown GanTrainConfig field '{key}'")
            if key in ("stage_resolutions", "stage_iterations") and value is not None:
                value = tuple(value)
            setattr(cfg, key, value)
        cfg.validate()
        return cfg


@dataclass
class GrowthState:
    current_stage: int = 0
    fade_iteration: int = 0
    alpha: float = 1.0

    def to_dict(self) -> dict:
        return {
            "current_stage": self.current_stage,
            "fade_iteration": self.fade_iteration,
            "alpha": self.alpha,
        }

    @staticmethod
    def from_dict(d: dict) -> "GrowthState":
        return GrowthState(d["current_stage"], d["fade_iteration"], d["alpha"])


# ---------------------------------------------------------------------------
# losses


def _check_logits(name: str, logits: torch.Tensor) -> None:
    if logits.dim() != 2 or logits.shape[1] != 4:
        raise ValidationError(f"{name} must be a (batch, 4) logit tensor")


def discriminator_loss(
    logits_real_malig: torch.Tensor,
    logits_fake: torch.Tensor,
    logits_benign: torch.Tensor,
    logits_normal: torch.Tensor,
    penalty: torch.Tensor | float = 0.0,
    scale: float = 0.2,
) -> torch.Tensor:
    """Four-way cross-entropy with benign/normal terms scaled down, plus penalty."""
    for name, logits in (
        ("logits_real_malig", logits_real_malig),
        ("logits_fake", logits_fake),
        ("logits_benign", logits_benign),
        ("logits_normal", logits_normal),
    ):
        _check_logits(name, logits)

    def ce(logits: torch.Tensor, cls: int) -> torch.Tensor:
        target = torch.full((logits.shape[0],), cls, dtype=torch.long)
        return F.cross_entropy(logits, target)

    loss = ce(logits_real_malig, 0) + ce(logits_fake, 1)
    loss = loss + scale * (ce(logits_benign, 2) + ce(logits_normal, 3))
    return loss + penalty


def generator_loss(logits_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating objective: push fakes toward the real-malignant class."""
    _check_logits("logits_fake", logits_fake)
    target = torch.zeros(logits_fake.shape[0], dtype=torch.long)
    return F.cross_entropy(logits_fake, target)


def gradient_penalty(
    discriminator: nn.Module,
    x_real: torch.Tensor,
    torch_rng: torch.Generator | None = None,
    gp_lambda: float = 10.0,
    gp_k: float = 1.0,
    perturbation_scale: float = 0.5,
    alpha: float = 1.0,
) -> torch.Tensor:
    """Penalize deviation of the input-gradient norm from k near the real data.

    Each example is perturbed by per-pixel U(0,1) noise scaled by
    perturbation_scale times its own intensity spread; the gradient is taken
    of the real-malignant logit with respect to the perturbed input.
    """
    spread = x_real.detach().flatten(1).std(dim=1).reshape(-1, *([1] * (x_real.dim() - 1)))
    if torch_rng is None:
        delta = torch.rand_like(x_real)
    else:
        delta = torch.rand(x_real.shape, generator=torch_rng, dtype=x_real.dtype)
    x_pert = (x_real.detach() + delta * perturbation_scale * spread).requires_grad_(True)
    logits = discriminator(x_pert, alpha) if _takes_alpha(discriminator) else discriminator(x_pert)
    grad = torch.autograd.grad(logits[:, 0].sum(), x_pert, create_graph=True)[0]
    norms = grad.flatten(1).norm(2, dim=1)
    return gp_lambda * ((norms - gp_k) ** 2).mean()


def _takes_alpha(module: nn.Module) -> bool:
    return isinstance(module, Discriminator)


def fade_weight(iteration: int, fade_iterations: int = 3000) -> float:
    """Linear blend weight of the freshly grown layer, clamped to [0, 1]."""
    if iteration < 0:
        raise ValidationError("iteration must be >= 0")
    return min(1.0, max(0.0, iteration / fade_iterations))


def grow(nets: tuple[Generator, Discriminator], next_resolution: int) -> tuple[Generator, Discriminator]:
    generator, discriminator = nets
    generator.grow(next_resolution)
    discriminator.grow(next_resolution)
    return generator, discriminator


# ---------------------------------------------------------------------------
# data streams


@lru_cache(maxsize=2048)
def _cached_patch(path: str) -> np.ndarray:
    import cv2

    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"failed to read {path}")
    return (raw.astype(np.float32) * (2.0 / 65535.0) - 1.0).astype(np.float32)


class PatchStream:
    """Infinite shuffled stream of patches of given classes from a corpus."""

    def __init__(self, corpus: Corpus, label_classes: tuple[str, ...], split: str, seed: int,
                 provenance: str | None = "real"):
        self.records = []
        for cls in label_classes:
            self.records.extend(corpus.select(split=split, label_class=cls, provenance=provenance))
        if not self.records:
            raise StreamExhaustedError(
                f"no patches for classes {label_classes} in split '{split}'"
            )
        self.corpus = corpus
        self.rng = np.random.default_rng(seed)
        self._order = self.rng.permutation(len(self.records))
        self._cursor = 0

    def _next_record(self):
        if self._cursor >= len(self._order):
            self._order = self.rng.permutation(len(self.records))
            self._cursor = 0
        record = self.records[self._order[self._cursor]]
        self._cursor += 1
        return record

    def next_batch(self, batch_size: int, resolution: int) -> torch.Tensor:
        arrays = []
        for _ in range(batch_size):
            record = self._next_record()
            arrays.append(_cached_patch(str(self.corpus.image_path(record))))
        batch = torch.from_numpy(np.stack(arrays)[:, None, :, :])
        full = batch.shape[-1]
        if resolution < full:
            batch = F.avg_pool2d(batch, full // resolution)
        return batch


@dataclass
class TaskStreams:
    """Class slots for one adversarial task: D targets plus generator inputs."""

    target_real: PatchStream
    generator_input: PatchStream
    benign: PatchStream
    aux: PatchStream


def streams_for_task(corpus: Corpus, task: str, seed: int, split: str = "train") -> TaskStreams:
    if task not in TASKS:
        raise ValidationError(f"task must be one of {TASKS}")
    malignant = ("malignant-mass", "malignant-calc")
    if task == "mass":
        spec = {"target_real": ("malignant-mass",), "generator_input": ("normal",),
                "benign": ("benign",), "aux": ("normal",)}
    elif task == "calc":
        spec = {"target_real": ("malignant-calc",), "generator_input": ("normal",),
                "benign": ("benign",), "aux": ("normal",)}
    else:  # removal: the "real" slot is normal tissue, malignant fills the aux slot
        spec = {"target_real": ("normal",), "generator_input": malignant,
                "benign": ("benign",), "aux": malignant}
    return TaskStreams(**{
        name: PatchStream(corpus, classes, split, seed=seed + i)
        for i, (name, classes) in enumerate(spec.items())
    })


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    final_checkpoint: Path
    checkpoints: list[Path]
    log_path: Path
    update_log: list[str] = field(default_factory=list)


def _rebuild_optimizer(
    old: torch.optim.Optimizer, module: nn.Module, config: GanTrainConfig
) -> torch.optim.Optimizer:
    """Fresh single-group Adam over all params, keeping state for existing ones."""
    fresh = torch.optim.Adam(
        module.parameters(), lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_epsilon,
    )
    for param, state in old.state.items():
        fresh.state[param] = state
    return fresh


def train_gan(
    config: GanTrainConfig,
    streams: TaskStreams,
    nets: tuple[Generator, Discriminator],
    out_dir: Path,
    task: str = "mass",
) -> TrainResult:
    """Run the staged adversarial loop and emit checkpoints plus a loss log."""
    config.validate()
    generator, discriminator = nets
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    noise_rng = np.random.default_rng(config.seed + 1)
    gp_rng = torch.Generator().manual_seed(config.seed + 2)

    betas = (config.adam_beta1, config.adam_beta2)
    g_opt = torch.optim.Adam(generator.parameters(), lr=config.learning_rate, betas=betas,
                             eps=config.adam_epsilon)
    d_opt = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate, betas=betas,
                             eps=config.adam_epsilon)

    generator.train()
    discriminator.train()

    stage_iters = config.per_stage_iterations()
    growth = GrowthState(current_stage=0, fade_iteration=0, alpha=1.0)
    update_log: list[str] = []
    checkpoints: list[Path] = []
    log_path = out_dir / "loss_log.csv"
    log_rows: list[tuple] = []
    global_it = 0

    def save(tag: str) -> Path:
        path = out_dir / f"checkpoint_{tag}.ckpt"
        ckpt.save_gan_checkpoint(path, generator, discriminator, g_opt, d_opt, growth, config, task)
        checkpoints.append(path)
        return path

    for stage_idx, resolution in enumerate(config.stage_resolutions):
        if stage_idx == 0:
            if generator.top_resolution != resolution:
                raise ValidationError(
                    f"networks built at {generator.top_resolution}px but stage 0 is {resolution}px"
                )
        else:
            grow((generator, discriminator), resolution)
            g_opt = _rebuild_optimizer(g_opt, generator, config)
            d_opt = _rebuild_optimizer(d_opt, discriminator, config)
        growth.current_stage = stage_idx
        growth.fade_iteration = 0

        for it in range(stage_iters[stage_idx]):
            growth.fade_iteration = it
            alpha = 1.0 if stage_idx == 0 else fade_weight(it, config.fade_iterations)
            growth.alpha = alpha

            g_loss_value = float("nan")
            for _ in range(config.g_steps_per_d):
                base = streams.generator_input.next_batch(config.batch_size, resolution)
                noise = NoiseDraw.sample(generator.noise_keys(), noise_rng)
                _, combined = generator.lesion_and_combined(base, noise, alpha)
                g_loss = generator_loss(discriminator(combined, alpha))
                g_opt.zero_grad()
                g_loss.backward()
                g_opt.step()
                g_loss_value = float(g_loss.detach())
                update_log.append("G")

            real = streams.target_real.next_batch(config.batch_size, resolution)
            with torch.no_grad():
                base = streams.generator_input.next_batch(config.batch_size, resolution)
                noise = NoiseDraw.sample(generator.noise_keys(), noise_rng)
                _, fake = generator.lesion_and_combined(base, noise, alpha)
            benign = streams.benign.next_batch(config.batch_size, resolution)
            aux = streams.aux.next_batch(config.batch_size, resolution)
            gp = gradient_penalty(
                discriminator, real, gp_rng,
                gp_lambda=config.gp_lambda, gp_k=config.gp_k,
                perturbation_scale=config.perturbation_scale, alpha=alpha,
            )
            d_loss = discriminator_loss(
                discriminator(real, alpha),
                discriminator(fake, alpha),
                discriminator(benign, alpha),
                discriminator(aux, alpha),
                penalty=gp,
                scale=config.aux_loss_scale,
            )
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()
            update_log.append("D")

            d_loss_value = float(d_loss.detach())
            gp_value = float(gp.detach())
            if not (math.isfinite(d_loss_value) and math.isfinite(g_loss_value)):
                save(f"diagnostic_it{global_it}")
                _write_log(log_path, log_rows)
                raise ValidationError(
                    f"non-finite loss at iteration {global_it} "
                    f"(d={d_loss_value}, g={g_loss_value}); diagnostic checkpoint saved"
                )
            log_rows.append((global_it, d_loss_value, g_loss_value, gp_value, alpha, resolution))
            global_it += 1
            if config.checkpoint_interval and global_it % config.checkpoint_interval == 0:
                save(f"it{global_it}")

        save(f"stage{resolution}")

    final = save("final")
    _write_log(log_path, log_rows)
    return TrainResult(final_checkpoint=final, checkpoints=checkpoints, log_path=log_path,
                       update_log=update_log)


def _write_log(path: Path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "d_loss", "g_loss", "gp", "alpha", "stage"])
        writer.writerows(rows)
