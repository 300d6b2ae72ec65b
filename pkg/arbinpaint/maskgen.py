from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw
from pydantic import BaseModel, ConfigDict, Field, model_validator
from termcolor import colored

from arbinpaint.core_types import MIN_SIDE, Mask, derive_rng, derive_seed, save_mask
from arbinpaint.errors import MaskGenerationError, ValidationError
from utils.log_util import logger

# Stroke constants are expressed at this side length and scaled with the image diagonal
REFERENCE_SIDE = 512


class MaskSpec(BaseModel):
    ratio_min: float = Field(default=0.20, gt=0, lt=1)
    ratio_max: float = Field(default=0.30, gt=0, lt=1)
    max_strokes: int = Field(default=64, ge=1)
    brush_width_range: tuple[int, int] = (12, 40)
    vertex_count_range: tuple[int, int] = (1, 12)
    stroke_length_range: tuple[int, int] = (20, 80)
    max_angle: float = Field(default=2 * math.pi / 5, gt=0)
    retry_budget: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def check_ranges(self) -> MaskSpec:
        if self.ratio_min > self.ratio_max:
            raise ValueError(f"ratio_min {self.ratio_min} exceeds ratio_max {self.ratio_max}")
        for name in ("brush_width_range", "vertex_count_range", "stroke_length_range"):
            low, high = getattr(self, name)
            if low < 1 or low > high:
                raise ValueError(f"{name} must satisfy 1 <= low <= high, got {(low, high)}")
        return self


def mask_ratio(m: Mask) -> float:
    return np.count_nonzero(m) / m.size


def _draw_stroke(h: int, w: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    scale = math.hypot(h, w) / math.hypot(REFERENCE_SIDE, REFERENCE_SIDE)
    # width >= 3 keeps every stroke pixel 4-connected to its neighbours
    width = max(3, round(rng.uniform(*spec.brush_width_range) * scale))
    n_vertex = int(rng.integers(spec.vertex_count_range[0], spec.vertex_count_range[1] + 1))

    x, y = float(rng.integers(0, w)), float(rng.integers(0, h))
    angle = rng.uniform(0, 2 * math.pi)
    points = [(x, y)]
    for _ in range(n_vertex):
        angle += rng.uniform(-spec.max_angle, spec.max_angle)
        length = rng.uniform(*spec.stroke_length_range) * scale
        x = min(max(x + length * math.cos(angle), 0.0), w - 1.0)
        y = min(max(y + length * math.sin(angle), 0.0), h - 1.0)
        points.append((x, y))

    canvas = PILImage.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    draw.line(points, fill=255, width=width, joint="curve")
    radius = width / 2
    for px, py in (points[0], points[-1]):
        draw.ellipse([px - radius, py - radius, px + radius, py + radius], fill=255)
    return np.asarray(canvas) > 0


def generate_freeform_mask(h: int, w: int, spec: MaskSpec, rng: np.random.Generator) -> Mask:
    """Union of random brush strokes whose masked fraction lands in [ratio_min, ratio_max].

    Strokes are accepted while the mask stays under ratio_max; a stroke that overshoots is
    discarded and redrawn. `retry_budget` bounds consecutive rejections.
    """
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValidationError(f"mask dims must be at least {MIN_SIDE}, got {h}x{w}")

    mask = np.zeros((h, w), dtype=bool)
    accepted = 0
    rejected = 0
    while np.count_nonzero(mask) / mask.size < spec.ratio_min:
        if accepted >= spec.max_strokes:
            raise MaskGenerationError(
                f"ratio window [{spec.ratio_min}, {spec.ratio_max}] not reached within {spec.max_strokes} strokes"
            )
        candidate = mask | _draw_stroke(h, w, spec, rng)
        if np.count_nonzero(candidate) / candidate.size > spec.ratio_max:
            rejected += 1
            if rejected > spec.retry_budget:
                raise MaskGenerationError(
                    f"ratio window [{spec.ratio_min}, {spec.ratio_max}] unreachable within "
                    f"retry budget {spec.retry_budget}"
                )
            continue
        mask = candidate
        accepted += 1
        rejected = 0

    return mask.astype(np.float32)


def write_mask_corpus(out_dir: str | Path, n: int, h: int, w: int, spec: MaskSpec, seed: int) -> Path:
    """Writes n mask PNGs plus `manifest.txt` (filename, h, w, seed, ratio; tab separated)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = []
    for i in range(n):
        mask_seed = derive_seed(seed, i)
        mask = generate_freeform_mask(h, w, spec, derive_rng(mask_seed))
        filename = f"mask_{i:05d}.png"
        save_mask(mask, out_dir / filename)
        lines.append(f"{filename}\t{h}\t{w}\t{mask_seed}\t{mask_ratio(mask):.6f}")

    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote {n} masks ({h}x{w}) to {colored(str(out_dir), 'light_cyan')}")
    return manifest
