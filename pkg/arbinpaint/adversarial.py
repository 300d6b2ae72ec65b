from __future__ import annotations

from arbinpaint._compat import StrEnum
import math
from collections.abc import Callable, Sequence
from pathlib import Path

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic.dataclasses import dataclass
from termcolor import colored
from torch import nn

from arbinpaint.checkpoint import config_fingerprint, load_archive, save_archive
from arbinpaint.errors import ConfigError, TrainingAbortError, ValidationError
from utils.log_util import logger

DISC_MIN_SIDE = 16

Extractor = Callable[[torch.Tensor], Sequence[torch.Tensor]]


class DiscriminatorConfig(BaseModel):
    base_channels: int = Field(default=64, ge=1)
    stages: int = Field(default=4, ge=1)
    negative_slope: float = Field(default=0.2, ge=0)

    model_config = ConfigDict(extra="forbid")


class LossWeights(BaseModel):
    lambda_per: float = Field(default=10.0, ge=0)
    lambda_fm: float = Field(default=0.1, ge=0)
    lambda_r1: float = Field(default=10.0, ge=0)

    model_config = ConfigDict(extra="forbid")


@dataclass(config=ConfigDict(arbitrary_types_allowed=True))
class DiscOutput:
    logits: torch.Tensor
    activations: list[torch.Tensor]


class Discriminator(nn.Module):
    """Fully convolutional patch discriminator; every stride-2 stage output is exported."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DiscriminatorConfig()
        widths = [3, *(cfg.base_channels * 2**i for i in range(cfg.stages))]
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1), nn.LeakyReLU(cfg.negative_slope))
            for i in range(cfg.stages)
        )
        self.out = nn.Conv2d(widths[-1], 1, 3, padding=1)

    def forward(self, img: torch.Tensor) -> DiscOutput:
        if min(img.shape[-2:]) < DISC_MIN_SIDE:
            raise ValidationError(f"discriminator input must be at least {DISC_MIN_SIDE}px, got {tuple(img.shape[-2:])}")
        activations = []
        x = img
        for stage in self.stages:
            x = stage(x)
            activations.append(x)
        return DiscOutput(logits=self.out(x), activations=activations)


def loss_g_adv(fake: DiscOutput) -> torch.Tensor:
    # -log(sigmoid(z)) == softplus(-z)
    return F.softplus(-fake.logits).mean()


def loss_d_adv(real: DiscOutput, fake: DiscOutput) -> torch.Tensor:
    return F.softplus(-real.logits).mean() + F.softplus(fake.logits).mean()


def r1_penalty(
    real_img: torch.Tensor,
    disc: Callable[[torch.Tensor], DiscOutput | torch.Tensor],
    unsquared: bool = False,
) -> torch.Tensor:
    """Batch mean of the (squared) gradient norm of the summed real logits w.r.t. the real input."""
    x = real_img.detach().requires_grad_(True)
    out = disc(x)
    logits = out.logits if isinstance(out, DiscOutput) else out
    if not logits.requires_grad:
        return torch.zeros((), dtype=real_img.dtype)
    (grad,) = torch.autograd.grad(logits.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros((), dtype=real_img.dtype)
    sq = grad.pow(2).flatten(1).sum(dim=1)
    return (sq.sqrt() if unsquared else sq).mean()


def loss_perceptual(fake: torch.Tensor, real: torch.Tensor, extractor: Extractor) -> torch.Tensor:
    fake_layers = extractor(fake)
    if not fake_layers:
        raise ConfigError("perceptual extractor returned no layers")
    real_layers = extractor(real)
    return sum((f - r).abs().mean() for f, r in zip(fake_layers, real_layers, strict=True))


def loss_feature_matching(real: DiscOutput, fake: DiscOutput) -> torch.Tensor:
    if len(real.activations) != len(fake.activations):
        raise ValidationError(f"activation lists differ in length: {len(real.activations)} vs {len(fake.activations)}")
    total = torch.zeros((), dtype=fake.activations[0].dtype if fake.activations else torch.float32)
    for i, (r, f) in enumerate(zip(real.activations, fake.activations, strict=True)):
        if r.shape != f.shape:
            raise ValidationError(f"activation {i} shapes differ: {tuple(r.shape)} vs {tuple(f.shape)}")
        total = total + (f - r.detach()).abs().mean()
    return total


class LossParts(BaseModel):
    adv: torch.Tensor | float
    per: torch.Tensor | float = 0.0
    fm: torch.Tensor | float = 0.0
    r1: torch.Tensor | float = 0.0

    model_config = ConfigDict(arbitrary_types_allowed=True)

    def values(self) -> dict[str, float]:
        return {name: float(torch.as_tensor(getattr(self, name)).detach()) for name in ("adv", "per", "fm", "r1")}


def loss_total(parts: LossParts, weights: LossWeights | None = None) -> torch.Tensor | float:
    """adv + lambda_per * per + lambda_fm * fm + lambda_r1 * r1; a non-finite part aborts training."""
    weights = weights or LossWeights()
    for name, value in parts.values().items():
        if not math.isfinite(value):
            logger.error(f"Loss part {colored(name, 'red')} is {value}")
            raise TrainingAbortError(f"loss part {name} is {value}", part=name)
    return (
        parts.adv
        + weights.lambda_per * parts.per
        + weights.lambda_fm * parts.fm
        + weights.lambda_r1 * parts.r1
    )


class ExtractorProfile(StrEnum):
    DESK = "desk"
    PRETRAINED = "pretrained"


class ExtractorConfig(BaseModel):
    profile: ExtractorProfile = ExtractorProfile.DESK
    channels: list[int] = Field(default_factory=lambda: [16, 32, 64])
    include_pixels: bool = True
    seed: int = 1234
    weights: Path | None = None

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def check_weights(self) -> ExtractorConfig:
        if self.profile == ExtractorProfile.PRETRAINED and self.weights is None:
            raise ValueError("the pretrained extractor profile needs a weights archive")
        return self


class FeaturePyramid(nn.Module):
    """Frozen conv pyramid used by the perceptual loss and LPIPS.

    Layers: optionally the raw pixels, then one 3x3 conv + ReLU per entry of `channels`
    (stride 1 for the first, stride 2 after). `channel_weights` holds the per-layer LPIPS weights.
    """

    def __init__(self, cfg: ExtractorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ExtractorConfig()
        widths = [3, *cfg.channels]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.convs = nn.ModuleList(
                nn.Conv2d(widths[i], widths[i + 1], 3, stride=1 if i == 0 else 2, padding=1)
                for i in range(len(cfg.channels))
            )
        n_layers = len(cfg.channels) + int(cfg.include_pixels)
        out_widths = ([3] if cfg.include_pixels else []) + list(cfg.channels)
        for i, c in enumerate(out_widths):
            self.register_buffer(f"channel_weight_{i}", torch.full((c,), 1.0 / c))
        self.n_layers = n_layers

        if cfg.profile == ExtractorProfile.PRETRAINED:
            self.load_weights(cfg.weights)
        self.requires_grad_(False)
        self.eval()

    @property
    def channel_weights(self) -> list[torch.Tensor]:
        return [getattr(self, f"channel_weight_{i}") for i in range(self.n_layers)]

    def load_weights(self, path: Path | None) -> None:
        if path is None:
            raise ConfigError("no extractor weights archive given")
        archive = load_archive(path).require("extractor", extractor_fingerprint(self.cfg))
        self.load_state_dict(archive.tensors)
        logger.info(f"Loaded {colored('pretrained', 'green')} extractor weights from {path}")

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        layers = [x] if self.cfg.include_pixels else []
        for conv in self.convs:
            x = F.relu(conv(x))
            layers.append(x)
        return layers


def build_extractor(cfg: ExtractorConfig | None) -> FeaturePyramid:
    if cfg is None:
        raise ConfigError("no perceptual extractor configured")
    return FeaturePyramid(cfg)


def extractor_fingerprint(cfg: ExtractorConfig) -> str:
    """Fingerprint of the layer shapes only, so weights move between profiles."""
    return config_fingerprint(cfg.model_copy(update={"profile": ExtractorProfile.DESK, "weights": None, "seed": 0}))


def save_extractor_weights(extractor: FeaturePyramid, path: str | Path) -> Path:
    return save_archive(
        path, extractor.state_dict(), "extractor", extractor_fingerprint(extractor.cfg), seed=extractor.cfg.seed
    )
