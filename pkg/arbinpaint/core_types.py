from __future__ import annotations

from pathlib import Path
from typing import TypeAlias

import numpy as np
import torch
from numpy.typing import NDArray
from PIL import Image as PILImage
from pydantic import BaseModel, ConfigDict, Field
from pydantic.dataclasses import dataclass

from arbinpaint.errors import ValidationError

# H x W x 3 float32 in [0, 1]
Image: TypeAlias = NDArray[np.float32]
# H x W float32 in {0, 1}; 1 marks a pixel to synthesize
Mask: TypeAlias = NDArray[np.float32]

MIN_SIDE = 8


class Cell(BaseModel):
    """Source-feature extent over target extent, per axis."""

    c_h: float = Field(gt=0)
    c_w: float = Field(gt=0)

    model_config = ConfigDict(frozen=True, extra="forbid")

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor([self.c_h, self.c_w], dtype=dtype)


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class CoordGrid:
    h: int
    w: int
    # (h*w, 2), row-major over (row, col), each entry (x, y)
    coords: torch.Tensor

    @property
    def n_queries(self) -> int:
        return self.h * self.w


def validate_image(img: Image, name: str = "image") -> Image:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"{name} must be H x W x 3, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ValidationError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {img.shape[:2]}")
    if not np.isfinite(img).all():
        raise ValidationError(f"{name} contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return img


def validate_mask(mask: Mask, like: Image | None = None) -> Mask:
    if mask.ndim != 2:
        raise ValidationError(f"mask must be H x W, got shape {mask.shape}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValidationError("mask must be strictly binary")
    if like is not None and mask.shape != like.shape[:2]:
        raise ValidationError(f"mask dims {mask.shape} differ from image dims {like.shape[:2]}")
    return mask


def load_image(path: str | Path) -> Image:
    # FileNotFoundError / UnidentifiedImageError are both OSError
    with PILImage.open(path) as pil:
        if pil.mode != "RGB":
            raise ValidationError(f"{path} is {pil.mode}, expected 8-bit RGB")
        arr = np.asarray(pil, dtype=np.uint8)
    img = arr.astype(np.float32) / 255.0
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ValidationError(f"{path} is {img.shape[1]}x{img.shape[0]}, below the {MIN_SIDE}px minimum")
    return img


def to_uint8(img: Image) -> NDArray[np.uint8]:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(img: Image) -> Image:
    """Snap to the 8-bit grid exactly as save_image followed by load_image would."""
    return to_uint8(img).astype(np.float32) / 255.0


def save_image(img: Image, path: str | Path) -> None:
    validate_image(img)
    PILImage.fromarray(to_uint8(img)).save(path)


def load_mask(path: str | Path) -> Mask:
    with PILImage.open(path) as pil:
        arr = np.asarray(pil.convert("L"), dtype=np.uint8)
    return (arr > 127).astype(np.float32)


def save_mask(mask: Mask, path: str | Path) -> None:
    validate_mask(mask)
    PILImage.fromarray((mask * 255).astype(np.uint8)).save(path)


def make_coord_grid(h: int, w: int, dtype: torch.dtype = torch.float32) -> CoordGrid:
    if h < 1 or w < 1:
        raise ValidationError(f"grid dims must be positive, got {h}x{w}")
    ys = -1.0 + (2.0 * torch.arange(h, dtype=torch.float64) + 1.0) / h
    xs = -1.0 + (2.0 * torch.arange(w, dtype=torch.float64) + 1.0) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([xx, yy], dim=-1).reshape(h * w, 2).to(dtype)
    return CoordGrid(h=h, w=w, coords=coords)


def make_cell(src_h: int, src_w: int, tgt_h: int, tgt_w: int) -> Cell:
    if min(src_h, src_w, tgt_h, tgt_w) < 1:
        raise ValidationError(f"cell dims must be positive, got {(src_h, src_w, tgt_h, tgt_w)}")
    return Cell(c_h=src_h / tgt_h, c_w=src_w / tgt_w)


def composite(pred: Image, input: Image, mask: Mask) -> Image:
    if pred.shape != input.shape or mask.shape != input.shape[:2]:
        raise ValidationError(f"composite dims differ: {pred.shape}, {input.shape}, {mask.shape}")
    # np.where keeps known pixels bit-exact
    out = np.where(mask[..., None] > 0, np.clip(pred, 0.0, 1.0), input)
    return out.astype(np.float32)


def composite_tensor(pred: torch.Tensor, input: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return mask * pred + (1.0 - mask) * input


def to_tensor(img: Image, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).unsqueeze(0).to(dtype)


def mask_to_tensor(mask: Mask, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(mask))[None, None].to(dtype)


def from_tensor(t: torch.Tensor) -> Image:
    return t.detach().squeeze(0).permute(1, 2, 0).to(torch.float32).cpu().numpy().copy()


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox4x64 stream keyed by (seed, *keys); identical across platforms."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint32)[0])
