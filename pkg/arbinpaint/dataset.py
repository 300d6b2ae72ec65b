from __future__ import annotations

from arbinpaint._compat import StrEnum
import math
import re
from collections.abc import Iterator
from functools import lru_cache
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from termcolor import colored

from arbinpaint.core_types import (
    MIN_SIDE,
    Image,
    Mask,
    derive_rng,
    derive_seed,
    load_image,
    load_mask,
    save_image,
)
from arbinpaint.errors import ValidationError
from arbinpaint.maskgen import MaskSpec, generate_freeform_mask
from utils.log_util import logger
from utils.settings import settings

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
RATIO_PATTERN = re.compile(r"^(\d+):(\d+)$")
MANIFEST_HEADER = "# image\tmask\tmask_seed\theight\twidth\ttop\tleft"


def parse_ratio(label: str) -> tuple[int, int]:
    """'4:3' -> (4, 3), read as height:width."""
    match = RATIO_PATTERN.match(label.strip())
    if match is None:
        raise ValidationError(f"aspect ratio must look like 'h:w', got {label!r}")
    h, w = int(match.group(1)), int(match.group(2))
    if h < 1 or w < 1:
        raise ValidationError(f"aspect ratio terms must be positive, got {label!r}")
    return h, w


class CropPolicy(StrEnum):
    CENTER = "center"
    SIDES = "sides"
    NONE = "none"


class SplitSpec(BaseModel):
    name: str
    target_h: int = Field(ge=MIN_SIDE)
    target_w: int = Field(ge=MIN_SIDE)
    crop_policy: CropPolicy = CropPolicy.SIDES

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def check_label(self) -> SplitSpec:
        if RATIO_PATTERN.match(self.name):
            rh, rw = parse_ratio(self.name)
            if rh * self.target_w != rw * self.target_h:
                raise ValueError(f"split {self.name} does not match {self.target_h}x{self.target_w}")
        return self


class AtsConfig(BaseModel):
    enabled: bool = True
    ratios: list[str] = Field(default_factory=lambda: ["1:1", "3:4", "4:3", "16:9"])
    target_area: int = Field(default=512 * 512, ge=MIN_SIDE * MIN_SIDE)
    tolerance: float = Field(default=0.05, gt=0, lt=1)
    round_to: int = Field(default=1, ge=1)

    model_config = ConfigDict(extra="forbid")

    @field_validator("ratios")
    @classmethod
    def check_ratios(cls, v: list[str]) -> list[str]:
        if not v:
            raise ValueError("at least one aspect ratio is required")
        for label in v:
            parse_ratio(label)
        return v

    def active_ratios(self) -> list[str]:
        # ATS off falls back to fixed square crops
        return self.ratios if self.enabled else ["1:1"]


class ManifestEntry(BaseModel):
    image: Path
    mask: Path | None = None
    mask_seed: int | None = None
    height: int = Field(ge=MIN_SIDE)
    width: int = Field(ge=MIN_SIDE)
    top: int = Field(default=0, ge=0)
    left: int = Field(default=0, ge=0)

    model_config = ConfigDict(extra="forbid", frozen=True)

    def to_line(self) -> str:
        mask = str(self.mask) if self.mask is not None else "-"
        seed = str(self.mask_seed) if self.mask_seed is not None else "-"
        return f"{self.image}\t{mask}\t{seed}\t{self.height}\t{self.width}\t{self.top}\t{self.left}"

    @classmethod
    def from_line(cls, line: str) -> ManifestEntry:
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 7:
            raise ValidationError(f"manifest line needs 7 tab-separated fields, got {len(fields)}: {line!r}")
        image, mask, seed, height, width, top, left = fields
        return cls(
            image=Path(image),
            mask=None if mask == "-" else Path(mask),
            mask_seed=None if seed == "-" else int(seed),
            height=int(height),
            width=int(width),
            top=int(top),
            left=int(left),
        )

    def load(self) -> Image:
        img = _cached_image(str(self.image))
        crop = img[self.top : self.top + self.height, self.left : self.left + self.width]
        if crop.shape[:2] != (self.height, self.width):
            raise ValidationError(
                f"{self.image}: window {self.height}x{self.width}+{self.top}+{self.left} exceeds {img.shape[:2]}"
            )
        return crop


class SampleManifest(BaseModel):
    entries: list[ManifestEntry] = Field(default_factory=list)
    rejects: list[tuple[Path, str]] = Field(default_factory=list)

    model_config = ConfigDict(extra="forbid")

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join([MANIFEST_HEADER, *(e.to_line() for e in self.entries)]) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> SampleManifest:
        path = Path(path)
        lines = [line for line in path.read_text().splitlines() if line and not line.startswith("#")]
        entries = [ManifestEntry.from_line(line) for line in lines]
        missing = [e.image for e in entries if not e.image.exists()]
        missing += [e.mask for e in entries if e.mask is not None and not e.mask.exists()]
        if missing:
            raise FileNotFoundError(f"{path} references missing files: {', '.join(map(str, missing))}")
        return cls(entries=entries)

    def dims(self) -> set[tuple[int, int]]:
        return {(e.height, e.width) for e in self.entries}


@lru_cache(maxsize=64)
def _cached_image(path: str) -> Image:
    img = load_image(path)
    img.setflags(write=False)
    return img


def crop_dims(ratio: str, target_area: int, round_to: int = 1) -> tuple[int, int]:
    rh, rw = parse_ratio(ratio)
    r = rh / rw
    h = round(math.sqrt(target_area * r) / round_to) * round_to
    w = round(math.sqrt(target_area / r) / round_to) * round_to
    return h, w


def fitting_ratios(
    h: int, w: int, target_area: int, ratios: list[str], tolerance: float = 0.05, round_to: int = 1
) -> list[str]:
    """The ratios whose crop fits inside an h x w image and lands within `tolerance` of the area."""
    fits = []
    for ratio in ratios:
        ch, cw = crop_dims(ratio, target_area, round_to)
        if ch <= h and cw <= w and abs(ch * cw - target_area) <= tolerance * target_area:
            fits.append(ratio)
    return fits


def ats_window(
    h: int,
    w: int,
    rng: np.random.Generator,
    target_area: int,
    ratios: list[str] | None = None,
    ratio: str | None = None,
    tolerance: float = 0.05,
    round_to: int = 1,
) -> tuple[int, int, int, int]:
    """Returns (height, width, top, left) of an ATS crop window containing the centre pixel.

    Without a fixed `ratio` one is drawn among the ratios that fit the image.
    """
    if ratio is None:
        ratios = ratios or AtsConfig().ratios
        candidates = fitting_ratios(h, w, target_area, ratios, tolerance, round_to)
        if not candidates:
            raise ValidationError(f"none of {ratios} fits image {h}x{w} at area {target_area}")
        ratio = candidates[int(rng.integers(len(candidates)))]
    ch, cw = crop_dims(ratio, target_area, round_to)
    if abs(ch * cw - target_area) > tolerance * target_area:
        raise ValidationError(f"{ratio} crop {ch}x{cw} misses target area {target_area} by more than {tolerance}")
    if ch > h or cw > w:
        raise ValidationError(f"image {h}x{w} is smaller than the {ratio} crop {ch}x{cw}")

    cy, cx = h // 2, w // 2
    top = int(rng.integers(max(0, cy - ch + 1), min(h - ch, cy) + 1))
    left = int(rng.integers(max(0, cx - cw + 1), min(w - cw, cx) + 1))
    return ch, cw, top, left


def ats_crop(
    img: Image,
    rng: np.random.Generator,
    target_area: int,
    ratios: list[str] | None = None,
    ratio: str | None = None,
    tolerance: float = 0.05,
    round_to: int = 1,
) -> Image:
    """Crops the margins of `img` to an aspect ratio at roughly `target_area` pixels."""
    ch, cw, top, left = ats_window(*img.shape[:2], rng, target_area, ratios, ratio, tolerance, round_to)
    return img[top : top + ch, left : left + cw]


def _split_window(h: int, w: int, spec: SplitSpec) -> tuple[int, int, int, int]:
    """Returns (height, width, top, left) of the deterministic crop."""
    if spec.crop_policy == CropPolicy.NONE:
        return h, w, 0, 0
    th, tw = spec.target_h, spec.target_w
    if th > h or tw > w:
        raise ValidationError(f"source {h}x{w} is smaller than target {th}x{tw}")
    if spec.crop_policy == CropPolicy.SIDES and th != h and tw != w:
        raise ValidationError(f"sides policy crops one axis only, source {h}x{w} vs target {th}x{tw}")
    return th, tw, (h - th) // 2, (w - tw) // 2


def build_realworld_split(src_dir: str | Path, spec: SplitSpec, mask_seed: int = 0) -> SampleManifest:
    src_dir = Path(src_dir)
    sources = sorted(p for p in src_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    manifest = SampleManifest()
    for index, path in enumerate(sources):
        try:
            h, w = _cached_image(str(path)).shape[:2]
            height, width, top, left = _split_window(h, w, spec)
        except OSError as e:
            logger.error(f"Could not read {path} for split {colored(spec.name, 'yellow')}: {e}")
            if settings.is_debug():
                raise
            manifest.rejects.append((path, str(e)))
            continue
        except ValidationError as e:
            logger.warning(f"Rejected {path} for split {colored(spec.name, 'yellow')}: {e}")
            manifest.rejects.append((path, str(e)))
            continue
        manifest.entries.append(
            ManifestEntry(
                image=path,
                mask_seed=derive_seed(mask_seed, index),
                height=height,
                width=width,
                top=top,
                left=left,
            )
        )

    logger.info(
        f"Split {colored(spec.name, 'yellow')}: {len(manifest.entries)} entries, {len(manifest.rejects)} rejects"
    )
    return manifest


def materialize_split(manifest: SampleManifest, out_dir: str | Path) -> SampleManifest:
    """Writes every crop as PNG plus `manifest.txt` and `rejects.txt`; returns the rewritten manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = SampleManifest(rejects=list(manifest.rejects))
    for entry in manifest.entries:
        path = out_dir / f"{entry.image.stem}.png"
        save_image(entry.load(), path)
        written.entries.append(entry.model_copy(update={"image": path, "top": 0, "left": 0}))

    written.write(out_dir / "manifest.txt")
    (out_dir / "rejects.txt").write_text("".join(f"{p}\t{reason}\n" for p, reason in written.rejects))
    return written


class Batch(BaseModel):
    images: np.ndarray  # B x H x W x 3
    masks: np.ndarray  # B x H x W
    epoch: int
    index: int
    ratio: str | None = None

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @property
    def dims(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]


def _batch_ratio(manifest: SampleManifest, indices: list[int], ats: AtsConfig, rng: np.random.Generator) -> str:
    ratios = ats.active_ratios()
    fits = set(ratios)
    for idx in indices:
        entry = manifest.entries[idx]
        fits &= set(fitting_ratios(entry.height, entry.width, ats.target_area, ratios, ats.tolerance, ats.round_to))
    candidates = [r for r in ratios if r in fits]
    if not candidates:
        raise ValidationError(f"none of {ratios} fits every image of the batch at area {ats.target_area}")
    return candidates[int(rng.integers(len(candidates)))]


def plan_epoch(manifest: SampleManifest, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Deterministic batch plan: entries grouped by dims, shuffled per epoch, drop-last."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be positive, got {batch_size}")
    rng = derive_rng(seed, epoch, 0)

    groups: dict[tuple[int, int], list[int]] = {}
    for idx, entry in enumerate(manifest.entries):
        groups.setdefault((entry.height, entry.width), []).append(idx)

    batches: list[list[int]] = []
    for dims in sorted(groups):
        order = [groups[dims][i] for i in rng.permutation(len(groups[dims]))]
        batches += [order[i : i + batch_size] for i in range(0, len(order) - batch_size + 1, batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def steps_per_epoch(manifest: SampleManifest, batch_size: int) -> int:
    return len(plan_epoch(manifest, batch_size, seed=0, epoch=0))


def batch_iterator(
    manifest: SampleManifest,
    mask_spec: MaskSpec,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    ats: AtsConfig | None = None,
    start: int = 0,
) -> Iterator[Batch]:
    """Yields one epoch of (images, masks) batches; `start` skips batches already consumed.

    With ATS every batch draws one ratio among those fitting its entries; stored masks are
    cropped with the same window as their image.
    """
    plan = plan_epoch(manifest, batch_size, seed, epoch)
    for b, indices in enumerate(plan):
        if b < start:
            continue
        rng = derive_rng(seed, epoch, b, 2)
        ratio = None
        if ats is not None:
            ratio = _batch_ratio(manifest, indices, ats, rng)

        images: list[Image] = []
        masks: list[Mask] = []
        for idx in indices:
            entry = manifest.entries[idx]
            try:
                img = entry.load()
                mask = load_mask(entry.mask) if entry.mask is not None else None
                if ratio is not None and ats is not None:
                    ch, cw, top, left = ats_window(
                        *img.shape[:2], rng, ats.target_area, ratio=ratio, tolerance=ats.tolerance,
                        round_to=ats.round_to,
                    )
                    img = img[top : top + ch, left : left + cw]
                    if mask is not None:
                        mask = mask[top : top + ch, left : left + cw]
            except (OSError, ValidationError) as e:
                logger.error(f"Failed to load {entry.image} for batch {b} of epoch {epoch}: {e}")
                raise
            h, w = img.shape[:2]
            images.append(img)
            if mask is None:
                mask = generate_freeform_mask(h, w, mask_spec, derive_rng(seed, epoch, idx, 1))
            masks.append(mask)

        if len({img.shape for img in images}) != 1 or any(m.shape != images[0].shape[:2] for m in masks):
            raise ValidationError(f"batch {b} of epoch {epoch} mixes dims {[img.shape[:2] for img in images]}")

        yield Batch(images=np.stack(images), masks=np.stack(masks), epoch=epoch, index=b, ratio=ratio)
