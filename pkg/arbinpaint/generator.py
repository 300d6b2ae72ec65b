from __future__ import annotations

from arbinpaint._compat import StrEnum

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic.dataclasses import dataclass
from torch import nn

from arbinpaint.core_types import (
    MIN_SIDE,
    Cell,
    CoordGrid,
    Image,
    Mask,
    composite,
    from_tensor,
    make_cell,
    make_coord_grid,
    mask_to_tensor,
    to_tensor,
    validate_image,
    validate_mask,
)
from arbinpaint.errors import ValidationError
from arbinpaint.primitives import ChannelAttention, FfcBlock, LayerNorm2d, Mlp, NabConfig, NeighborhoodAttention

PAD_MULTIPLE = 8
# queries closer than this to a feature-cell centre snap onto it
SNAP_TOLERANCE = 1e-6


class EncoderKind(StrEnum):
    DPB = "dpb"
    PLAIN = "plain"


class BodyKind(StrEnum):
    NHAB = "nhab"
    FFC = "ffc"


class EnsembleKind(StrEnum):
    AREA = "area"
    DISTANCE = "distance"


class CellMode(StrEnum):
    RATIO = "ratio"
    LIIF = "liif"


class GeneratorConfig(BaseModel):
    encoder_channels: list[int] = Field(default_factory=lambda: [64, 128, 256])
    decoder_channels: list[int] = Field(default_factory=lambda: [256, 128, 64])
    decoder_hidden: int = Field(default=256, ge=1)
    nhab_groups: int = Field(default=2, ge=0)
    nhab_per_group: int = Field(default=4, ge=1)
    alpha: float = Field(default=0.03, ge=0)
    pyramid_layers: int = Field(default=3, ge=1)
    mlp_ratio: float = Field(default=2.0, gt=0)
    nab: NabConfig = Field(default_factory=NabConfig)
    ffc_global_ratio: float = Field(default=0.25, ge=0, lt=1)
    cab_reduction: int = Field(default=4, ge=1)
    query_chunk: int = Field(default=65536, ge=1)

    encoder_kind: EncoderKind = EncoderKind.DPB
    body_kind: BodyKind = BodyKind.NHAB
    strict_eq1: bool = False
    ensemble: EnsembleKind = EnsembleKind.AREA
    cell_mode: CellMode = CellMode.RATIO
    interpolation_only: bool = False

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def check_widths(self) -> GeneratorConfig:
        if len(self.encoder_channels) != 3:
            raise ValueError(f"encoder_channels must list 3 stages, got {self.encoder_channels}")
        if len(self.decoder_channels) < self.pyramid_layers:
            raise ValueError(
                f"decoder_channels {self.decoder_channels} has fewer widths than {self.pyramid_layers} pyramid layers"
            )
        if self.interpolation_only and any(c != self.encoder_channels[-1] for c in self.layer_widths()):
            raise ValueError("interpolation_only needs every decoder width equal to the last encoder width")
        return self

    def layer_widths(self) -> list[int]:
        return self.decoder_channels[len(self.decoder_channels) - self.pyramid_layers :]


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class Encoded:
    feature: torch.Tensor
    # unpadded input dims, then the reflect-padded dims the feature frame covers
    height: int
    width: int
    padded_h: int
    padded_w: int


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class PyramidLevel:
    feature: torch.Tensor
    h: int
    w: int
    cell: Cell


class Dpb(nn.Module):
    """Stride-2 downsample, FFC, channel attention."""

    def __init__(self, in_channels: int, out_channels: int, cfg: GeneratorConfig):
        super().__init__()
        self.down = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.ffc = FfcBlock(out_channels, cfg.ffc_global_ratio)
        self.cab = ChannelAttention(out_channels, cfg.cab_reduction)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValidationError(f"downsample block needs even dims, got {tuple(x.shape[-2:])}")
        return self.cab(self.ffc(self.down(x)))


class PlainDown(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.down = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValidationError(f"downsample block needs even dims, got {tuple(x.shape[-2:])}")
        return self.act(self.down(x))


class Nhab(nn.Module):
    """Pre-norm block: X_M = NAB(LN(X)) + alpha * CAB(LN(X)) + X, Y = MLP(LN(X_M)) + X_M."""

    def __init__(self, channels: int, cfg: GeneratorConfig):
        super().__init__()
        self.alpha = cfg.alpha
        self.strict_eq1 = cfg.strict_eq1
        self.norm1 = LayerNorm2d(channels)
        self.nab = NeighborhoodAttention(channels, cfg.nab)
        self.cab = ChannelAttention(channels, cfg.cab_reduction)
        self.norm2 = LayerNorm2d(channels)
        self.mlp = Mlp(channels, max(1, int(channels * cfg.mlp_ratio)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xn = self.norm1(x)
        xm = self.nab(xn)
        if self.alpha:
            xm = xm + self.alpha * self.cab(xn)
        if not self.strict_eq1:
            xm = xm + x
        y = rearrange(self.mlp(rearrange(self.norm2(xm), "b c h w -> b h w c")), "b h w c -> b c h w")
        return y + xm


class FfcResidual(nn.Module):
    def __init__(self, channels: int, cfg: GeneratorConfig):
        super().__init__()
        self.ffc = FfcBlock(channels, cfg.ffc_global_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.ffc(x)


class AttentionGroup(nn.Module):
    def __init__(self, channels: int, cfg: GeneratorConfig):
        super().__init__()
        block = Nhab if cfg.body_kind == BodyKind.NHAB else FfcResidual
        self.blocks = nn.Sequential(*(block(channels, cfg) for _ in range(cfg.nhab_per_group)))
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv(self.blocks(x))


class InrBlock(nn.Module):
    """Implicit neural block: queries a feature map at arbitrary coordinates.

    Each query gathers its 4 nearest feature vectors, runs the shared MLP f on (feature, relative offset),
    blends the 4 results with local-ensemble weights and feeds (blend, cell) to a second MLP.
    """

    def __init__(self, in_channels: int, out_channels: int, cfg: GeneratorConfig):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.interpolation_only = cfg.interpolation_only
        self.ensemble = cfg.ensemble
        self.cell_scale = 2.0 if cfg.cell_mode == CellMode.LIIF else 1.0
        self.query_chunk = cfg.query_chunk
        if not self.interpolation_only:
            self.f = Mlp(in_channels + 2, cfg.decoder_hidden, out_channels)
            self.refine = Mlp(out_channels + 2, cfg.decoder_hidden, out_channels)

    @staticmethod
    def corners(coords: torch.Tensor, h: int, w: int, ensemble: EnsembleKind = EnsembleKind.AREA):
        """Corner indices (N, 4), blend weights (N, 4) and relative offsets (N, 4, 2) for (x, y) queries.

        Computed in float64; corner order is top-left, top-right, bottom-left, bottom-right.
        """
        coords = coords.to(torch.float64)
        if coords.numel() and (coords.abs() > 1.0 + SNAP_TOLERANCE).any():
            raise ValidationError("query coordinates must lie in [-1, 1]")

        def axis(c: torch.Tensor, n: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
            raw = (c + 1.0) * n / 2.0 - 0.5
            snapped = raw.round()
            raw = torch.where((raw - snapped).abs() < SNAP_TOLERANCE, snapped, raw)
            pos = raw.clamp(0.0, n - 1.0)
            i0 = pos.floor().clamp(0, n - 1)
            i1 = (i0 + 1).clamp(max=n - 1)
            return raw, i0.long(), i1.long(), pos - i0

        ux, x0, x1, t = axis(coords[:, 0], w)
        uy, y0, y1, s = axis(coords[:, 1], h)

        index = torch.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], dim=1)
        rel = torch.stack(
            [
                torch.stack([ux - x0, uy - y0], dim=1),
                torch.stack([ux - x1, uy - y0], dim=1),
                torch.stack([ux - x0, uy - y1], dim=1),
                torch.stack([ux - x1, uy - y1], dim=1),
            ],
            dim=1,
        )
        if ensemble == EnsembleKind.AREA:
            # each corner weighs the rectangle spanned by the query and the opposite corner
            weights = torch.stack([(1 - t) * (1 - s), t * (1 - s), (1 - t) * s, t * s], dim=1)
        else:
            dist = torch.stack(
                [torch.hypot(t, s), torch.hypot(1 - t, s), torch.hypot(t, 1 - s), torch.hypot(1 - t, 1 - s)], dim=1
            )
            inv = 1.0 / (dist + 1e-9)
            weights = inv / inv.sum(dim=1, keepdim=True)
        return index, weights, rel

    def _query(self, flat: torch.Tensor, coords: torch.Tensor, h: int, w: int, cell: torch.Tensor) -> torch.Tensor:
        index, weights, rel = self.corners(coords, h, w, self.ensemble)
        weights = weights.to(flat.dtype)
        rel = rel.to(flat.dtype)
        b = flat.shape[0]

        blended = None
        for corner in range(4):
            a = rearrange(flat[:, :, index[:, corner]], "b c n -> b n c")
            if self.interpolation_only:
                out = a
            else:
                out = self.f(torch.cat([a, rel[None, :, corner].expand(b, -1, -1)], dim=-1))
            term = weights[None, :, corner, None] * out
            blended = term if blended is None else blended + term

        if self.interpolation_only:
            return blended
        return self.refine(torch.cat([blended, cell.to(flat.dtype).expand(b, blended.shape[1], 2)], dim=-1))

    def forward(self, src: torch.Tensor, grid: CoordGrid, cell: Cell) -> torch.Tensor:
        b, c, h, w = src.shape
        if c != self.in_channels:
            raise ValidationError(f"implicit block expects {self.in_channels} channels, got {c}")
        flat = src.reshape(b, c, h * w)
        cell_vec = cell.as_tensor(torch.float64) * self.cell_scale

        chunks = [
            self._query(flat, grid.coords[i : i + self.query_chunk], h, w, cell_vec)
            for i in range(0, grid.n_queries, self.query_chunk)
        ]
        return rearrange(torch.cat(chunks, dim=1), "b (h w) c -> b c h w", h=grid.h, w=grid.w)


def resample(src: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Bilinear resampling through the implicit query path (cell-centre convention, clamped borders)."""
    c = src.shape[1]
    cfg = GeneratorConfig(interpolation_only=True, encoder_channels=[c, c, c], decoder_channels=[c], pyramid_layers=1)
    block = InrBlock(c, c, cfg)
    return block(src, make_coord_grid(h, w, torch.float64), make_cell(src.shape[-2], src.shape[-1], h, w))


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GeneratorConfig()
        channels = [4, *cfg.encoder_channels]
        if cfg.encoder_kind == EncoderKind.DPB:
            stages = [Dpb(channels[i], channels[i + 1], cfg) for i in range(3)]
        else:
            stages = [PlainDown(channels[i], channels[i + 1]) for i in range(3)]
        self.encoder = nn.ModuleList(stages)

        body_channels = cfg.encoder_channels[-1]
        self.body = nn.ModuleList(AttentionGroup(body_channels, cfg) for _ in range(cfg.nhab_groups))

        widths = [body_channels, *cfg.layer_widths()]
        self.decoder = nn.ModuleList(InrBlock(widths[i], widths[i + 1], cfg) for i in range(cfg.pyramid_layers))
        self.head = nn.Linear(widths[-1], 3)

    def encode(self, img: torch.Tensor, mask: torch.Tensor) -> Encoded:
        h, w = img.shape[-2:]
        if mask.shape[-2:] != (h, w):
            raise ValidationError(f"mask dims {tuple(mask.shape[-2:])} differ from image dims {(h, w)}")
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValidationError(f"input must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")

        x = torch.cat([img * (1.0 - mask), mask], dim=1)
        pad_h, pad_w = -h % PAD_MULTIPLE, -w % PAD_MULTIPLE
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        for stage in self.encoder:
            x = stage(x)
        return Encoded(feature=x, height=h, width=w, padded_h=h + pad_h, padded_w=w + pad_w)

    def body_forward(self, x: torch.Tensor) -> torch.Tensor:
        for group in self.body:
            x = group(x)
        return x

    def decode_features(
        self, enc: Encoded, target_h: int, target_w: int, pyramid: list[PyramidLevel] | None = None
    ) -> torch.Tensor:
        if target_h < 1 or target_w < 1:
            raise ValidationError(f"target dims must be positive, got {target_h}x{target_w}")
        x = enc.feature
        dtype = torch.float64
        for layer, block in enumerate(self.decoder):
            h, w = x.shape[-2:]
            if layer < len(self.decoder) - 1:
                grid = make_coord_grid(2 * h, 2 * w, dtype)
                cell = make_cell(h, w, 2 * h, 2 * w)
            else:
                # the target grid covers only the unpadded part of the padded frame
                full = make_coord_grid(target_h, target_w, dtype)
                scale = torch.tensor([enc.width / enc.padded_w, enc.height / enc.padded_h], dtype=dtype)
                grid = CoordGrid(h=target_h, w=target_w, coords=(full.coords + 1.0) * scale - 1.0)
                cell = make_cell(h * enc.height, w * enc.width, target_h * enc.padded_h, target_w * enc.padded_w)
            x = block(x, grid, cell)
            if pyramid is not None:
                pyramid.append(PyramidLevel(feature=x, h=grid.h, w=grid.w, cell=cell))
        return x

    def decode(self, enc: Encoded, target_h: int, target_w: int) -> torch.Tensor:
        feat = self.decode_features(enc, target_h, target_w)
        out = self.head(rearrange(feat, "b c h w -> b h w c"))
        return torch.sigmoid(rearrange(out, "b h w c -> b c h w"))

    def forward(
        self, img: torch.Tensor, mask: torch.Tensor, target_h: int | None = None, target_w: int | None = None
    ) -> torch.Tensor:
        enc = self.encode(img, mask)
        enc = Encoded(
            feature=self.body_forward(enc.feature),
            height=enc.height,
            width=enc.width,
            padded_h=enc.padded_h,
            padded_w=enc.padded_w,
        )
        return self.decode(enc, target_h or enc.height, target_w or enc.width)


def build_generator(cfg: GeneratorConfig | None = None, seed: int = 0) -> Generator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(cfg)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@torch.no_grad()
def inpaint(
    model: Generator,
    img: Image,
    mask: Mask,
    target_h: int | None = None,
    target_w: int | None = None,
    composite_output: bool = True,
) -> Image:
    """Runs the generator on one HWC image; composites when the output keeps the input dims."""
    validate_image(img)
    validate_mask(mask, like=img)
    dtype = next(model.parameters()).dtype
    pred = from_tensor(model(to_tensor(img, dtype), mask_to_tensor(mask, dtype), target_h, target_w))
    pred = np.clip(pred, 0.0, 1.0).astype(np.float32)
    if composite_output and pred.shape == img.shape:
        return composite(pred, img, mask)
    return pred
