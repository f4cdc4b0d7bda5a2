"""Generator and discriminator topology for contextual lesion synthesis.

The generator is a U-net over 256x256 patches: stride-2 encoder blocks with
per-block constant-noise channels, self-attention at a fixed resolution, a
1x1xC bottleneck embedding, nearest-neighbor-upsampling decoder blocks with
skip connections, and a residual lesion output (border-zeroed, clipped, added
to the input patch). The discriminator reuses the encoder shape with a filter
multiple, max pooling instead of strides, spectral normalization, and a
four-way head ordered [real-malignant, fake, benign, normal].

Progressive growing enters and exits every stage through 1x1 image adapters
so blocks always consume feature maps; fading blends the adapter path of the
previous stage with the freshly appended block path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .patches import PATCH_SIZE, ImagePatch

DISCRIMINATOR_CLASSES = ("real-malignant", "fake", "benign", "normal")


@dataclass
class NetworkSpec:
    input_resolution: int = 256
    base_filters: int = 16
    attention_resolution: int = 32
    bottleneck_channels: int = 4
    bottleneck_pre_channels: int = 2048
    discriminator_filter_multiple: int = 8
    leaky_slope: float = 0.2
    border_crop: int = 10
    generator_spectral_norm: bool = False
    decoder_attention: bool = False

    def validate(self) -> None:
        r = self.input_resolution
        if r < 64 or (r & (r - 1)) != 0:
            raise ValidationError("input_resolution must be a power of two >= 64")
        if self.attention_resolution < 1 or r % self.attention_resolution != 0:
            raise ValidationError("attention_resolution must divide input_resolution")
        if self.attention_resolution > r // 2:
            raise ValidationError("attention_resolution must be at most input_resolution/2")
        if not 0 <= self.border_crop < r // 2:
            raise ValidationError("border_crop must be < input_resolution/2")
        if self.base_filters < 1 or self.bottleneck_channels < 1:
            raise ValidationError("base_filters and bottleneck_channels must be >= 1")
        if self.discriminator_filter_multiple < 1:
            raise ValidationError("discriminator_filter_multiple must be >= 1")
        deepest = self.channels_at(4)
        ratio = self.bottleneck_pre_channels / deepest
        if ratio < 1 or 2 ** round(math.log2(ratio)) != ratio:
            raise ValidationError(
                "bottleneck_pre_channels must be channels_at(4) times a power of two"
            )

    def channels_at(self, resolution: int) -> int:
        """Feature width at a given spatial resolution (entry width at the top)."""
        if resolution >= self.input_resolution:
            return self.base_filters
        return self.base_filters * (self.input_resolution // (2 * resolution))

    def encoder_resolutions(self, top: int | None = None) -> list[int]:
        """Output resolutions of active encoder blocks, high to low (top/2 .. 4)."""
        top = top or self.input_resolution
        out, r = [], top // 2
        while r >= 4:
            out.append(r)
            r //= 2
        return out

    def extra_conv_count(self) -> int:
        return int(round(math.log2(self.bottleneck_pre_channels / self.channels_at(4))))

    def to_dict(self) -> dict:
        return {
            "input_resolution": self.input_resolution,
            "base_filters": self.base_filters,
            "attention_resolution": self.attention_resolution,
            "bottleneck_channels": self.bottleneck_channels,
            "bottleneck_pre_channels": self.bottleneck_pre_channels,
            "discriminator_filter_multiple": self.discriminator_filter_multiple,
            "leaky_slope": self.leaky_slope,
            "border_crop": self.border_crop,
            "generator_spectral_norm": self.generator_spectral_norm,
            "decoder_attention": self.decoder_attention,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        spec = NetworkSpec()
        for key, value in d.items():
            if not hasattr(spec, key):
                raise ValidationError(f"unknown NetworkSpec field '{key}'")
            setattr(spec, key, value)
        spec.validate()
        return spec


@dataclass
class NoiseDraw:
    """One scalar in [-1, 1] per encoder/decoder block, keyed by block name."""

    values: dict[str, float] = field(default_factory=dict)

    def validate(self, keys: Iterable[str]) -> None:
        for key in keys:
            if key not in self.values:
                raise ValidationError(f"NoiseDraw missing scalar for block '{key}'")
            if not -1.0 <= self.values[key] <= 1.0:
                raise ValidationError(f"NoiseDraw['{key}'] outside [-1, 1]")

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    @staticmethod
    def sample(keys: Iterable[str], rng: np.random.Generator) -> "NoiseDraw":
        return NoiseDraw({k: float(rng.uniform(-1.0, 1.0)) for k in sorted(keys)})

    @staticmethod
    def zeros(keys: Iterable[str]) -> "NoiseDraw":
        return NoiseDraw({k: 0.0 for k in keys})


# ---------------------------------------------------------------------------
# spectral normalization


def _l2_normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / (v.norm() + eps)


def spectral_normalize(
    weight: torch.Tensor,
    state: tuple[torch.Tensor, torch.Tensor] | None = None,
    iterations: int = 1,
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor], bool]:
    """Divide a weight by its power-iteration top singular value estimate.

    Returns (normalized weight, (u, v) state, degenerate flag). A zero matrix
    is returned unchanged with the degenerate flag set.
    """
    w2d = weight.detach().reshape(weight.shape[0], -1)
    if state is None:
        u = _l2_normalize(torch.ones(w2d.shape[0], dtype=weight.dtype))
    else:
        u = state[0]
    v = torch.zeros(w2d.shape[1], dtype=weight.dtype)
    for _ in range(max(iterations, 1)):
        v = _l2_normalize(w2d.t() @ u)
        u = _l2_normalize(w2d @ v)
    sigma = float(u @ w2d @ v)
    if sigma <= 1e-12:
        return weight, (u, v), True
    return weight / sigma, (u, v), False


class _SpectralNormMixin:
    """Per-forward power iteration over the module's own weight."""

    def _init_power_state(self) -> None:
        w2d = self.weight.detach().reshape(self.weight.shape[0], -1)
        self.register_buffer("weight_u", _l2_normalize(torch.ones(w2d.shape[0])))
        self.register_buffer("weight_v", _l2_normalize(torch.ones(w2d.shape[1])))

    def normalized_weight(self) -> torch.Tensor:
        w2d = self.weight.reshape(self.weight.shape[0], -1)
        if self.training:
            with torch.no_grad():
                v = _l2_normalize(w2d.t() @ self.weight_u)
                u = _l2_normalize(w2d @ v)
                self.weight_u.copy_(u)
                self.weight_v.copy_(v)
        sigma = torch.dot(self.weight_u, w2d @ self.weight_v)
        if float(sigma.detach()) <= 1e-12:
            return self.weight
        return self.weight / sigma


class SNConv2d(nn.Conv2d, _SpectralNormMixin):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_power_state()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class SNLinear(nn.Linear, _SpectralNormMixin):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_power_state()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.normalized_weight(), self.bias)


def _conv2d(in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
            spectral: bool = False) -> nn.Conv2d:
    cls = SNConv2d if spectral else nn.Conv2d
    return cls(in_ch, out_ch, kernel, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# building blocks


class SelfAttention(nn.Module):
    """SAGAN-style self-attention with a zero-initialized residual gate."""

    def __init__(self, channels: int, spectral: bool = False):
        super().__init__()
        inner = max(channels // 8, 1)
        self.query = _conv2d(channels, inner, 1, spectral=spectral)
        self.key = _conv2d(channels, inner, 1, spectral=spectral)
        self.value = _conv2d(channels, channels, 1, spectral=spectral)
        self.gamma = nn.Parameter(torch.zeros(1))

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """(B, HW, HW) attention; each query row is a softmax over key positions."""
        b, _, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)  # B, HW, C'
        k = self.key(x).flatten(2)  # B, C', HW
        return torch.softmax(torch.bmm(q, k), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        att = self.attention_weights(x)
        v = self.value(x).flatten(2)  # B, C, HW
        out = torch.bmm(v, att.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.gamma * out


def _concat_noise(x: torch.Tensor, scalar: float) -> torch.Tensor:
    noise = x.new_full((x.shape[0], 1, x.shape[2], x.shape[3]), scalar)
    return torch.cat([x, noise], dim=1)


class EncoderBlock(nn.Module):
    """Noise concat -> 3x3 stride-2 conv -> LeakyReLU."""

    def __init__(self, in_ch: int, out_ch: int, slope: float, spectral: bool = False):
        super().__init__()
        self.conv = _conv2d(in_ch + 1, out_ch, 3, stride=2, padding=1, spectral=spectral)
        self.slope = slope

    def forward(self, x: torch.Tensor, noise: float) -> torch.Tensor:
        return F.leaky_relu(self.conv(_concat_noise(x, noise)), self.slope)


class DecoderBlock(nn.Module):
    """Skip+noise concat -> nearest upsample -> two 3x3 convs with ReLU."""

    def __init__(self, in_ch: int, out_ch: int, spectral: bool = False):
        super().__init__()
        self.conv1 = _conv2d(in_ch + 1, out_ch, 3, padding=1, spectral=spectral)
        self.conv2 = _conv2d(out_ch, out_ch, 3, padding=1, spectral=spectral)

    def forward(self, x: torch.Tensor, skip: torch.Tensor, noise: float) -> torch.Tensor:
        h = _concat_noise(torch.cat([x, skip], dim=1), noise)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.conv1(h))
        return F.relu(self.conv2(h))


class DiscriminatorBlock(nn.Module):
    """3x3 conv -> LeakyReLU -> 2x2 max pool (stride-2 replacement)."""

    def __init__(self, in_ch: int, out_ch: int, slope: float, spectral: bool = True):
        super().__init__()
        self.conv = _conv2d(in_ch, out_ch, 3, padding=1, spectral=spectral)
        self.slope = slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.max_pool2d(F.leaky_relu(self.conv(x), self.slope), 2)


def zero_border(x: torch.Tensor, border: int) -> torch.Tensor:
    """Zero an outer frame of `border` pixels (differentiable mask multiply)."""
    if border <= 0:
        return x
    mask = torch.zeros(1, 1, x.shape[2], x.shape[3], dtype=x.dtype)
    mask[:, :, border:-border, border:-border] = 1.0
    return x * mask


def orthogonal_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.orthogonal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# generator


class Generator(nn.Module):
    def __init__(self, spec: NetworkSpec, top_resolution: int | None = None):
        super().__init__()
        spec.validate()
        self.spec = spec
        top = top_resolution or spec.input_resolution
        self._check_stage(top)
        self.top_resolution = top
        spectral = spec.generator_spectral_norm

        self.in_adapters = nn.ModuleDict()
        self.out_adapters = nn.ModuleDict()
        self.enc_blocks = nn.ModuleDict()
        self.dec_blocks = nn.ModuleDict()

        deepest = spec.channels_at(4)
        extras = []
        ch = deepest
        for _ in range(spec.extra_conv_count()):
            extras.append(_conv2d(ch, ch * 2, 3, padding=1, spectral=spectral))
            ch *= 2
        self.extra_convs = nn.ModuleList(extras)
        self.bottleneck = _conv2d(spec.bottleneck_pre_channels, spec.bottleneck_channels, 4,
                                  spectral=spectral)
        expand_cls = nn.ConvTranspose2d
        self.expand = expand_cls(spec.bottleneck_channels, deepest, 4)
        self.encoder_attention = SelfAttention(spec.channels_at(spec.attention_resolution),
                                               spectral=spectral)
        self.decoder_attention = (
            SelfAttention(spec.channels_at(spec.attention_resolution), spectral=spectral)
            if spec.decoder_attention
            else None
        )

        self._build_stage(top)
        orthogonal_init(self)
        with torch.no_grad():
            self.encoder_attention.gamma.zero_()
            if self.decoder_attention is not None:
                self.decoder_attention.gamma.zero_()

    def _check_stage(self, top: int) -> None:
        spec = self.spec
        if top < 8 or (top & (top - 1)) != 0 or top > spec.input_resolution:
            raise ValidationError("stage resolution must be a power of two in [8, input_resolution]")
        if spec.attention_resolution > top // 2:
            raise ValidationError("stage resolution too small for the attention placement")

    def _build_stage(self, top: int) -> None:
        """Create the adapters and blocks needed to operate at resolution `top`."""
        spec = self.spec
        spectral = spec.generator_spectral_norm
        self.in_adapters[str(top)] = _conv2d(1, spec.channels_at(top), 1, spectral=spectral)
        self.out_adapters[str(top)] = _conv2d(spec.channels_at(top), 1, 1, spectral=spectral)
        for r in spec.encoder_resolutions(top):
            key = str(r)
            if key not in self.enc_blocks:
                self.enc_blocks[key] = EncoderBlock(
                    spec.channels_at(2 * r), spec.channels_at(r), spec.leaky_slope, spectral
                )
        for r in reversed(spec.encoder_resolutions(top)):
            out_res = 2 * r
            key = str(out_res)
            if key not in self.dec_blocks:
                self.dec_blocks[key] = DecoderBlock(
                    2 * spec.channels_at(r), spec.channels_at(out_res), spectral
                )

    def grow(self, next_resolution: int) -> None:
        """Append the blocks for the next stage; existing weights are untouched."""
        if next_resolution != 2 * self.top_resolution:
            raise ValidationError(
                f"can only grow from {self.top_resolution} to {2 * self.top_resolution}, "
                f"got {next_resolution}"
            )
        self._check_stage(next_resolution)
        previous = {name for name, _ in self.named_parameters()}
        self._build_stage(next_resolution)
        for name, param in self.named_parameters():
            if name not in previous:
                if param.dim() >= 2:
                    nn.init.orthogonal_(param)
                else:
                    nn.init.zeros_(param)
        self.top_resolution = next_resolution

    def noise_keys(self) -> list[str]:
        keys = [f"enc{r}" for r in self.spec.encoder_resolutions(self.top_resolution)]
        keys += [f"dec{2 * r}" for r in self.spec.encoder_resolutions(self.top_resolution)]
        return keys

    def border_pixels(self, resolution: int) -> int:
        return round(self.spec.border_crop * resolution / self.spec.input_resolution)

    def forward(self, x: torch.Tensor, noise: NoiseDraw, alpha: float = 1.0) -> torch.Tensor:
        """Raw lesion channel at the current stage resolution (pre border/clip)."""
        spec = self.spec
        top = self.top_resolution
        if x.shape[-1] != top or x.shape[-2] != top:
            raise ValidationError(f"generator expects {top}x{top} input, got {tuple(x.shape[-2:])}")
        noise.validate(self.noise_keys())
        half = str(top // 2)
        fading = alpha < 1.0 and half in self.in_adapters

        enc_res = spec.encoder_resolutions(top)
        skips: dict[int, torch.Tensor] = {}

        h = self.enc_blocks[str(top // 2)](self.in_adapters[str(top)](x), noise[f"enc{top // 2}"])
        if fading:
            h_old = self.in_adapters[half](F.avg_pool2d(x, 2))
            h = (1.0 - alpha) * h_old + alpha * h
        if top // 2 == spec.attention_resolution:
            h = self.encoder_attention(h)
        skips[top // 2] = h
        for r in enc_res[1:]:
            h = self.enc_blocks[str(r)](h, noise[f"enc{r}"])
            if r == spec.attention_resolution:
                h = self.encoder_attention(h)
            skips[r] = h

        for conv in self.extra_convs:
            h = F.leaky_relu(conv(h), spec.leaky_slope)
        embedding = self.bottleneck(h)  # (B, C, 1, 1)
        f = self.expand(embedding)  # (B, channels_at(4), 4, 4)

        dec_res = [2 * r for r in reversed(enc_res)]  # 8 .. top
        for out_res in dec_res[:-1]:
            f = self.dec_blocks[str(out_res)](f, skips[out_res // 2], noise[f"dec{out_res}"])
            if self.decoder_attention is not None and out_res == spec.attention_resolution:
                f = self.decoder_attention(f)
        f_half = f
        f_top = self.dec_blocks[str(top)](f_half, skips[top // 2], noise[f"dec{top}"])
        raw = self.out_adapters[str(top)](f_top)
        if fading:
            raw_old = F.interpolate(self.out_adapters[half](f_half), scale_factor=2, mode="nearest")
            raw = (1.0 - alpha) * raw_old + alpha * raw
        return raw

    def lesion_and_combined(
        self, base: torch.Tensor, noise: NoiseDraw, alpha: float = 1.0
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Differentiable postamble: border-zeroed clipped lesion plus residual add."""
        raw = self.forward(base, noise, alpha)
        lesion = zero_border(raw, self.border_pixels(base.shape[-1]))
        lesion = torch.clamp(lesion, -1.0, 1.0)
        combined = torch.clamp(base + lesion, -1.0, 1.0)
        return lesion, combined


# ---------------------------------------------------------------------------
# discriminator


class Discriminator(nn.Module):
    def __init__(self, spec: NetworkSpec, top_resolution: int | None = None,
                 spectral: bool = True):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.spectral = spectral
        top = top_resolution or spec.input_resolution
        self.top_resolution = top
        self.in_adapters = nn.ModuleDict()
        self.blocks = nn.ModuleDict()
        self.attention = SelfAttention(self._chan(spec.attention_resolution), spectral=spectral)
        head_cls = SNLinear if spectral else nn.Linear
        self.head = head_cls(self._chan(4) * 16, len(DISCRIMINATOR_CLASSES))
        self._build_stage(top)
        orthogonal_init(self)
        with torch.no_grad():
            self.attention.gamma.zero_()

    def _chan(self, resolution: int) -> int:
        return self.spec.channels_at(resolution) * self.spec.discriminator_filter_multiple

    def _build_stage(self, top: int) -> None:
        self.in_adapters[str(top)] = _conv2d(1, self._chan(top), 1, spectral=self.spectral)
        for r in self.spec.encoder_resolutions(top):
            key = str(r)
            if key not in self.blocks:
                self.blocks[key] = DiscriminatorBlock(
                    self._chan(2 * r), self._chan(r), self.spec.leaky_slope, self.spectral
                )

    def grow(self, next_resolution: int) -> None:
        if next_resolution != 2 * self.top_resolution:
            raise ValidationError(
                f"can only grow from {self.top_resolution} to {2 * self.top_resolution}, "
                f"got {next_resolution}"
            )
        previous = {name for name, _ in self.named_parameters()}
        self._build_stage(next_resolution)
        for name, param in self.named_parameters():
            if name not in previous:
                if param.dim() >= 2:
                    nn.init.orthogonal_(param)
                else:
                    nn.init.zeros_(param)
        self.top_resolution = next_resolution

    def forward(self, x: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
        top = self.top_resolution
        if x.shape[-1] != top or x.shape[-2] != top:
            raise ValidationError(f"discriminator expects {top}x{top} input")
        half = str(top // 2)
        fading = alpha < 1.0 and half in self.in_adapters

        h = self.blocks[str(top // 2)](self.in_adapters[str(top)](x))
        if fading:
            h_old = self.in_adapters[half](F.avg_pool2d(x, 2))
            h = (1.0 - alpha) * h_old + alpha * h
        if top // 2 == self.spec.attention_resolution:
            h = self.attention(h)
        for r in self.spec.encoder_resolutions(top)[1:]:
            h = self.blocks[str(r)](h)
            if r == self.spec.attention_resolution:
                h = self.attention(h)
        return self.head(h.flatten(1))


# ---------------------------------------------------------------------------
# public operations


def instantiate_networks(
    spec: NetworkSpec, initial_resolution: int | None = None
) -> tuple[Generator, Discriminator]:
    spec.validate()
    generator = Generator(spec, top_resolution=initial_resolution)
    discriminator = Discriminator(spec, top_resolution=initial_resolution)
    return generator, discriminator


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class TripletPatch:
    """Aligned (lesion, base, combined) channels of one generated patch."""

    lesion: np.ndarray
    base: np.ndarray
    combined: np.ndarray

    def validate(self, border_crop: int = 10) -> None:
        for name, channel in (("lesion", self.lesion), ("base", self.base),
                              ("combined", self.combined)):
            if channel.shape != (PATCH_SIZE, PATCH_SIZE):
                raise ValidationError(f"TripletPatch.{name} must be {PATCH_SIZE}x{PATCH_SIZE}")
            if channel.min() < -1.0 or channel.max() > 1.0:
                raise ValidationError(f"TripletPatch.{name} outside [-1, 1]")
        expected = np.clip(self.base + self.lesion, -1.0, 1.0)
        if not np.array_equal(expected, self.combined):
            raise ValidationError("combined channel != clip(base + lesion)")
        b = border_crop
        if b > 0:
            frame = np.concatenate([
                self.lesion[:b, :].ravel(), self.lesion[-b:, :].ravel(),
                self.lesion[:, :b].ravel(), self.lesion[:, -b:].ravel(),
            ])
            if np.any(frame != 0.0):
                raise ValidationError("lesion border frame is not exactly zero")

    def as_channels(self) -> np.ndarray:
        return np.stack([self.lesion, self.base, self.combined])


def generate_triplet(
    generator: Generator, base: ImagePatch, noise: NoiseDraw
) -> TripletPatch:
    """Run one eval-mode synthesis pass and package the three output channels."""
    base.validate()
    generator.eval()
    with torch.no_grad():
        x = torch.from_numpy(base.pixels).reshape(1, 1, PATCH_SIZE, PATCH_SIZE)
        lesion_t, combined_t = generator.lesion_and_combined(x, noise, alpha=1.0)
    lesion = lesion_t.numpy()[0, 0].astype(np.float32)
    base_px = base.pixels.astype(np.float32)
    combined = np.clip(base_px + lesion, -1.0, 1.0)
    triplet = TripletPatch(lesion=lesion, base=base_px, combined=combined)
    triplet.validate(border_crop=generator.border_pixels(PATCH_SIZE))
    return triplet


def discriminate(discriminator: Discriminator, patch: np.ndarray) -> np.ndarray:
    """Four logits [real-malignant, fake, benign, normal] for one patch grid."""
    discriminator.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(patch, dtype=np.float32))
        x = x.reshape(1, 1, patch.shape[-2], patch.shape[-1])
        logits = discriminator(x)
    out = logits.numpy()[0]
    if not np.all(np.isfinite(out)):
        raise ValidationError("discriminator produced non-finite logits")
    return out
