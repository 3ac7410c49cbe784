"""Mamba-style feature extractor: stem, patch embedding, VSS stages, MFA and the refinement decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ssm import VSSBlock

MSAA_SPLIT = (Fraction(3, 8), Fraction(1, 2), Fraction(1, 8))
MODALITIES = ("optical", "sar")


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stem_kernel: int = 7
    patch_size: int = 4
    stage_channels: list[int] = field(default_factory=lambda: [96, 192, 384])
    blocks_per_stage: int = 2
    decoder_channels: int = 64
    d_state: int = 8
    expand: int = 2
    use_mfa: bool = True
    tied_scan: bool = False
    input_sigma: float = 0.0  # fixed Gaussian pre-filter on the input image; 0 disables

    def __post_init__(self):
        self.stage_channels = list(self.stage_channels)
        if len(self.stage_channels) != 3:
            raise ValueError("stage_channels must list exactly 3 stages")
        if any(c <= 0 or c % 8 for c in self.stage_channels):
            raise ValueError("every stage channel count must be a positive multiple of 8")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("stage_channels must be strictly increasing")
        if self.patch_size < 1 or self.blocks_per_stage < 1 or self.decoder_channels < 1:
            raise ValueError("patch_size, blocks_per_stage and decoder_channels must be positive")
        if self.input_sigma < 0:
            raise ValueError("input_sigma must be non-negative")

    @classmethod
    def tiny(cls, **overrides) -> "BackboneConfig":
        base = dict(stage_channels=[16, 32, 64], blocks_per_stage=1)
        base.update(overrides)
        return cls(**base)

    @property
    def size_multiple(self) -> int:
        return self.patch_size * 2 ** (len(self.stage_channels) - 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureMap:
    """A (batch, C, H, W) feature tensor tagged with its pyramid level and pixel stride."""

    data: torch.Tensor
    level: int
    stride: int

    @property
    def shape(self):
        return tuple(self.data.shape)


def conv_bn_relu(cin: int, cout: int, kernel: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
    )


def msaa_split_sizes(channels: int) -> tuple[int, int, int]:
    if channels % 8:
        raise ValueError(f"MSAA needs a channel count divisible by 8, got {channels}")
    return tuple(int(channels * d) for d in MSAA_SPLIT)


class Stem(nn.Module):
    def __init__(self, channels: int, kernel: int = 7):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv2d(1, channels, kernel, padding=kernel // 2)
        self.norm = nn.BatchNorm2d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if min(x.shape[-2:]) < self.kernel:
            raise ValueError(f"image {tuple(x.shape[-2:])} is smaller than the {self.kernel}x{self.kernel} stem kernel")
        return F.relu(self.norm(self.conv(x)))


class PatchEmbed(nn.Module):
    def __init__(self, cin: int, cout: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(cin, cout, patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        P = self.patch_size
        ph, pw = -x.shape[-2] % P, -x.shape[-1] % P
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        return self.proj(x)


class MSAA(nn.Module):
    """Multi-scale adaptive aggregation with learnable per-channel modulation ``alpha``."""

    def __init__(self, channels: int):
        super().__init__()
        c1, c2, c3 = msaa_split_sizes(channels)
        self.splits = (c1, c2, c3)
        self.inp = nn.Sequential(conv_bn_relu(channels, channels, 3), nn.Conv2d(channels, channels, 1))
        self.alpha = nn.Parameter(torch.zeros(channels, 1, 1))
        self.dw5 = nn.Conv2d(channels, channels, 5, padding=2, groups=channels)
        self.branch5 = nn.Conv2d(c1, c1, 5, padding=2, groups=c1)
        self.branch7 = nn.Conv2d(c2, c2, 7, padding=3, groups=c2)
        self.mix = nn.Conv2d(channels, channels, 1)
        self.gate = nn.Conv2d(channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)

    def zero_residual(self) -> None:
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        y = self.inp(f)
        y1 = F.gelu(y + self.alpha * (y - y.mean(dim=(-2, -1), keepdim=True)))
        yb = self.dw5(y1)
        s1, s2, s3 = torch.split(yb, self.splits, dim=1)
        z = torch.cat([self.branch5(s1), self.branch7(s2), s3], dim=1)
        z = F.silu(self.mix(z)) * F.silu(self.gate(y1))
        return f + self.out(z)


class ChannelAggregation(nn.Module):
    """Channel re-weighting for the deepest level, with learnable per-channel ``beta``."""

    def __init__(self, channels: int):
        super().__init__()
        self.inp = nn.Sequential(conv_bn_relu(channels, channels, 3), nn.Conv2d(channels, channels, 1))
        self.dw3 = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.reduce = nn.Conv2d(channels, channels, 1)
        self.beta = nn.Parameter(torch.zeros(channels, 1, 1))
        self.out = nn.Conv2d(channels, channels, 1)

    def zero_residual(self) -> None:
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        yb = F.gelu(self.dw3(self.inp(f)))
        z = yb + (yb - self.beta * F.gelu(self.reduce(yb)))
        return f + self.out(z)


class Decoder(nn.Module):
    """Top-down refinement: upsample, concatenate with the shallower level, fuse; then project."""

    def __init__(self, level_channels: list[int], out_channels: int):
        super().__init__()
        self.level_channels = list(level_channels)
        # fuses[i] merges the upsampled deeper map into level i
        self.fuses = nn.ModuleList(
            conv_bn_relu(level_channels[i + 1] + level_channels[i], level_channels[i], 3)
            for i in range(len(level_channels) - 1)
        )
        self.proj = nn.Conv2d(level_channels[0], out_channels, 1)

    def forward(self, z: list[torch.Tensor], out_size: tuple[int, int]) -> torch.Tensor:
        n = len(z)
        if n == 0 or n > len(self.level_channels):
            raise ValueError(f"decoder built for up to {len(self.level_channels)} levels, got {n}")
        for i, t in enumerate(z):
            if t.shape[1] != self.level_channels[i]:
                raise ValueError(f"level {i} has {t.shape[1]} channels, expected {self.level_channels[i]}")
        x = z[-1]
        for i in range(n - 2, -1, -1):
            target = z[i]
            if x.shape[-2] > target.shape[-2] or x.shape[-1] > target.shape[-1]:
                raise ValueError("inconsistent pyramid: deeper level is larger than the shallower one")
            if x.shape[-2:] != target.shape[-2:]:
                x = F.interpolate(x, size=target.shape[-2:], mode="bilinear", align_corners=False)
            x = self.fuses[i](torch.cat([x, target], dim=1))
        x = self.proj(x)
        return F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)


class Backbone(nn.Module):
    """Single-modality feature extractor mapping (batch, 1, H, W) images to (batch, decoder_channels, H, W)."""

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        c = cfg.stage_channels
        self.stem = Stem(cfg.stem_channels, cfg.stem_kernel)
        self.patch_embed = PatchEmbed(cfg.stem_channels, c[0], cfg.patch_size)
        self.stages = nn.ModuleList(
            nn.Sequential(*[VSSBlock(ch, cfg.d_state, cfg.expand, tied=cfg.tied_scan)
                            for _ in range(cfg.blocks_per_stage)])
            for ch in c
        )
        self.downsamples = nn.ModuleList(conv_bn_relu(a, b, 3, stride=2) for a, b in zip(c, c[1:]))
        self.level_channels = [c[0]] + c
        self.msaa = nn.ModuleList(MSAA(ch) for ch in self.level_channels[:-1])
        self.ca = ChannelAggregation(self.level_channels[-1])
        self.decoder = Decoder(self.level_channels, cfg.decoder_channels)
        # derived from the config, so kept out of the state dict
        self.register_buffer("prefilter", gaussian_kernel1d(cfg.input_sigma), persistent=False)

    def smooth(self, image: torch.Tensor) -> torch.Tensor:
        """Separable Gaussian low-pass with reflect borders; identity when ``input_sigma`` is 0."""
        k = self.prefilter.to(image.dtype)
        r = k.numel() // 2
        if r == 0:
            return image
        if min(image.shape[-2:]) <= r:
            raise ValueError(f"image smaller than the pre-filter radius {r}")
        x = F.conv2d(F.pad(image, (r, r, 0, 0), mode="reflect"), k.view(1, 1, 1, -1))
        return F.conv2d(F.pad(x, (0, 0, r, r), mode="reflect"), k.view(1, 1, -1, 1))

    def pad(self, image: torch.Tensor) -> torch.Tensor:
        m = self.cfg.size_multiple
        ph, pw = -image.shape[-2] % m, -image.shape[-1] % m
        if ph or pw:
            image = F.pad(image, (0, pw, 0, ph), mode="reflect")
        return image

    def encode(self, image: torch.Tensor) -> list[FeatureMap]:
        P = self.cfg.patch_size
        x = self.patch_embed(self.stem(image))
        levels = [FeatureMap(x, 0, P)]
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.downsamples[i - 1](x)
            x = stage(x)
            levels.append(FeatureMap(x, i + 1, P * 2 ** i))
        return levels

    def mfa(self, levels: list[FeatureMap]) -> list[torch.Tensor]:
        if len(levels) != len(self.level_channels):
            raise ValueError(f"MFA expects {len(self.level_channels)} pyramid levels, got {len(levels)}")
        if not self.cfg.use_mfa:
            return [lv.data for lv in levels]
        out = [m(lv.data) for m, lv in zip(self.msaa, levels[:-1])]
        out.append(self.ca(levels[-1].data))
        return out

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(1)
        H, W = image.shape[-2:]
        padded = self.pad(self.smooth(image))
        z = self.mfa(self.encode(padded))
        out = self.decoder(z, padded.shape[-2:])
        return out[..., :H, :W]


def gaussian_kernel1d(sigma: float) -> torch.Tensor:
    """Normalized 1-D Gaussian truncated at 3 sigma; ``[1.0]`` for sigma 0."""
    if sigma == 0:
        return torch.ones(1, dtype=torch.float64)
    r = max(1, math.ceil(3 * sigma))
    t = torch.arange(-r, r + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def extract_features(weights: Mapping[str, Backbone], image: torch.Tensor, modality: str) -> torch.Tensor:
    """Run the modality-specific backbone on ``image``."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    return weights[modality](image)
