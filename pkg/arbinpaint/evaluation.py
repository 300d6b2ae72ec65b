from __future__ import annotations

from arbinpaint._compat import StrEnum
import math
from collections.abc import Sequence
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from skimage.metrics import peak_signal_noise_ratio, structural_similarity
from termcolor import colored

from arbinpaint.adversarial import Extractor
from arbinpaint.core_types import (
    Image,
    Mask,
    composite,
    derive_rng,
    from_tensor,
    load_mask,
    mask_to_tensor,
    quantize,
    save_image,
    to_tensor,
    validate_mask,
)
from arbinpaint.dataset import ManifestEntry, SampleManifest
from arbinpaint.errors import CapabilityError, ConfigError, ValidationError
from arbinpaint.generator import Generator, inpaint
from arbinpaint.maskgen import MaskSpec, generate_freeform_mask
from utils.log_util import logger
from utils.settings import settings

SSIM_WINDOW = 11
PSNR_TABLE_CAP = 99.0


def _check_pair(a: Image, b: Image) -> tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise ValidationError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a: Image, b: Image) -> float:
    a64, b64 = _check_pair(a, b)
    if np.mean((a64 - b64) ** 2) == 0.0:
        return math.inf
    return float(peak_signal_noise_ratio(a64, b64, data_range=1.0))


def ssim(a: Image, b: Image) -> float:
    """Mean SSIM over an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a64, b64 = _check_pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValidationError(f"SSIM needs at least {SSIM_WINDOW}px per side, got {a.shape[:2]}")
    return float(
        structural_similarity(
            a64,
            b64,
            data_range=1.0,
            channel_axis=-1,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
        )
    )


def _unit_normalize(feat: torch.Tensor) -> torch.Tensor:
    return feat / (feat.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)


@torch.no_grad()
def lpips(a: Image, b: Image, extractor: Extractor | None) -> float:
    """Sum over layers of the position-mean of channel-weighted squared differences of unit-normalised features."""
    if extractor is None:
        raise ConfigError("LPIPS needs a feature extractor")
    _check_pair(a, b)
    fa, fb = extractor(to_tensor(a)), extractor(to_tensor(b))
    if not fa:
        raise ConfigError("LPIPS extractor returned no layers")
    weights = getattr(extractor, "channel_weights", None) or [torch.ones(f.shape[1]) for f in fa]

    total = 0.0
    for la, lb, w in zip(fa, fb, weights, strict=True):
        diff = (_unit_normalize(la) - _unit_normalize(lb)).pow(2)
        total += float((diff * w.view(1, -1, 1, 1).to(diff.dtype)).sum(dim=1).mean())
    return total


def masked_l1(a: Image, b: Image, mask: Mask) -> float:
    a64, b64 = _check_pair(a, b)
    n = float(mask.sum()) * a.shape[2]
    return float(np.abs(a64 - b64)[mask > 0].sum() / n) if n else 0.0


def masked_psnr(a: Image, b: Image, mask: Mask) -> float:
    a64, b64 = _check_pair(a, b)
    region = mask > 0
    if not region.any():
        return math.inf
    mse = float(np.mean((a64[region] - b64[region]) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


class AdapterKind(StrEnum):
    DIRECT = "direct"
    RESIZE = "resize"
    PAD_CONSTANT = "pad_constant"
    PAD_EDGE = "pad_edge"


class AdapterMode(BaseModel):
    kind: AdapterKind = AdapterKind.DIRECT
    train_size: int = Field(default=512, ge=8)

    model_config = ConfigDict(extra="forbid")


@runtime_checkable
class InpaintModel(Protocol):
    square_only: bool

    def __call__(self, img: Image, mask: Mask) -> Image: ...


class GeneratorModel:
    """Adapts a generator to the InpaintModel protocol; returns the raw prediction."""

    square_only = False

    def __init__(self, generator: Generator):
        self.generator = generator.eval()

    def __call__(self, img: Image, mask: Mask) -> Image:
        return inpaint(self.generator, img, mask, composite_output=False)


def resize_image(img: Image, h: int, w: int) -> Image:
    if img.shape[:2] == (h, w):
        return img
    out = F.interpolate(to_tensor(img), size=(h, w), mode="bilinear", align_corners=False)
    return np.clip(from_tensor(out), 0.0, 1.0).astype(np.float32)


def resize_mask(mask: Mask, h: int, w: int) -> Mask:
    """A target pixel is a hole when any source pixel it covers is one."""
    if mask.shape == (h, w):
        return mask
    out = F.adaptive_max_pool2d(mask_to_tensor(mask), (h, w))
    return out[0, 0].numpy().astype(np.float32)


def pad_geometry(h: int, w: int, train_size: int) -> tuple[int, int, int, int]:
    """(scaled_h, scaled_w, top, left) of the content placed in the train_size square."""
    scale = train_size / max(h, w)
    sh, sw = min(train_size, round(h * scale)), min(train_size, round(w * scale))
    return sh, sw, (train_size - sh) // 2, (train_size - sw) // 2


def infer_adapter(img: Image, mask: Mask, model: InpaintModel, mode: AdapterMode) -> Image:
    """Runs `model` through one inference adapter; the result has the input dims and keeps known pixels."""
    validate_mask(mask, like=img)
    h, w = img.shape[:2]
    ts = mode.train_size
    # hole pixels never reach the model, not even blended in by a resize
    img_in = (img * (1.0 - mask[..., None])).astype(np.float32)

    if mode.kind == AdapterKind.DIRECT:
        if model.square_only and h != w:
            raise CapabilityError(f"model only accepts square inputs, got {h}x{w} in direct mode")
        pred = model(img_in, mask)
    elif mode.kind == AdapterKind.RESIZE:
        pred = resize_image(model(resize_image(img_in, ts, ts), resize_mask(mask, ts, ts)), h, w)
    else:
        sh, sw, top, left = pad_geometry(h, w, ts)
        pads = ((top, ts - sh - top), (left, ts - sw - left))
        small = resize_image(img_in, sh, sw)
        if mode.kind == AdapterKind.PAD_CONSTANT:
            canvas = np.pad(small, (*pads, (0, 0)), mode="constant")
        else:
            canvas = np.pad(small, (*pads, (0, 0)), mode="edge")
        # padded pixels count as known
        canvas_mask = np.pad(resize_mask(mask, sh, sw), pads, mode="constant")
        out = model(canvas.astype(np.float32), canvas_mask.astype(np.float32))
        pred = resize_image(out[top : top + sh, left : left + sw], h, w)

    if pred.shape != img.shape:
        raise ValidationError(f"model returned {pred.shape} for a {img.shape} input")
    return composite(pred, img, mask)


class EvalRow(BaseModel):
    setting: str
    psnr: float
    ssim: float
    lpips: float
    n_images: int
    masked_psnr: float | None = None
    masked_l1: float | None = None

    model_config = ConfigDict(ser_json_inf_nan="constants")


class EvalReport(BaseModel):
    rows: list[EvalRow] = Field(default_factory=list)
    failures: list[str] = Field(default_factory=list)

    def to_table(self) -> str:
        header = f"{'setting':<28}{'PSNR':>10}{'SSIM':>10}{'LPIPS':>10}{'n':>6}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            shown = min(row.psnr, PSNR_TABLE_CAP)
            lines.append(f"{row.setting:<28}{shown:>10.3f}{row.ssim:>10.4f}{row.lpips:>10.4f}{row.n_images:>6}")
        return "\n".join(lines)

    def to_records(self) -> list[str]:
        return [row.model_dump_json() for row in self.rows]

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(self.to_table() + "\n")
        (out_dir / "report.jsonl").write_text("".join(r + "\n" for r in self.to_records()))


class EvalConfig(BaseModel):
    splits: list[Path] = Field(default_factory=list)
    masks: Path | None = None
    adapters: list[AdapterKind] = Field(default_factory=lambda: list(AdapterKind))
    train_size: int = Field(default=512, ge=8)
    out_dir: Path | None = None
    masked_metrics: bool = False
    checkpoint: Path | None = None

    model_config = ConfigDict(extra="forbid")


class MaskCorpus:
    """Frozen mask set read from a `write_mask_corpus` directory; masks are max-pool resized to each image."""

    def __init__(self, directory: Path):
        lines = (directory / "manifest.txt").read_text().splitlines()
        self.paths = [directory / line.split("\t")[0] for line in lines if line.strip()]
        if not self.paths:
            raise ValidationError(f"mask corpus {directory} is empty")

    def mask_for(self, index: int, h: int, w: int) -> Mask:
        return resize_mask(load_mask(self.paths[index % len(self.paths)]), h, w)


def missing_artifacts(cfg: EvalConfig) -> list[Path]:
    missing = [p for p in cfg.splits if not p.exists()]
    if cfg.masks is not None and not (cfg.masks / "manifest.txt").exists():
        missing.append(cfg.masks / "manifest.txt")
    if cfg.checkpoint is not None and not cfg.checkpoint.exists():
        missing.append(cfg.checkpoint)
    return missing


def _split_label(path: Path) -> str:
    return path.parent.name if path.name == "manifest.txt" else path.stem


def _entry_mask(entry: ManifestEntry, index: int, corpus: MaskCorpus | None, mask_spec: MaskSpec) -> Mask:
    if entry.mask is not None:
        return load_mask(entry.mask)
    if corpus is not None:
        return corpus.mask_for(index, entry.height, entry.width)
    return generate_freeform_mask(entry.height, entry.width, mask_spec, derive_rng(entry.mask_seed or 0))


def run_experiment(
    cfg: EvalConfig,
    model: InpaintModel,
    extractor: Extractor,
    mask_spec: MaskSpec | None = None,
) -> EvalReport:
    """Every (split, adapter) pair: infer, composite, quantize to 8 bits, score, average."""
    missing = missing_artifacts(cfg)
    if missing:
        raise FileNotFoundError(f"missing evaluation artifacts: {', '.join(map(str, missing))}")
    mask_spec = mask_spec or MaskSpec()
    corpus = MaskCorpus(cfg.masks) if cfg.masks is not None else None

    report = EvalReport()
    for split_path in cfg.splits:
        manifest = SampleManifest.read(split_path)
        split = _split_label(split_path)
        for kind in cfg.adapters:
            mode = AdapterMode(kind=kind, train_size=cfg.train_size)
            setting = f"{split}/{kind}"
            scores: list[Sequence[float]] = []
            for index, entry in enumerate(manifest.entries):
                try:
                    img = entry.load()
                    mask = _entry_mask(entry, index, corpus, mask_spec)
                    out = quantize(infer_adapter(img, mask, model, mode))
                except (OSError, ValidationError) as e:
                    logger.error(f"{colored(setting, 'yellow')}: {entry.image} failed: {e}")
                    if settings.is_debug():
                        raise
                    report.failures.append(f"{setting}\t{entry.image}\t{e}")
                    continue
                if cfg.out_dir is not None:
                    dump_dir = cfg.out_dir / split / str(kind)
                    dump_dir.mkdir(parents=True, exist_ok=True)
                    save_image(out, dump_dir / f"{entry.image.stem}.png")
                row = [psnr(out, img), ssim(out, img), lpips(out, img, extractor)]
                if cfg.masked_metrics:
                    row += [masked_psnr(out, img, mask), masked_l1(out, img, mask)]
                scores.append(row)

            if not scores:
                logger.warning(f"No images scored for {colored(setting, 'yellow')}")
                continue
            means = np.mean(np.asarray(scores, dtype=np.float64), axis=0).tolist()
            report.rows.append(
                EvalRow(
                    setting=setting,
                    psnr=means[0],
                    ssim=means[1],
                    lpips=means[2],
                    n_images=len(scores),
                    masked_psnr=means[3] if cfg.masked_metrics else None,
                    masked_l1=means[4] if cfg.masked_metrics else None,
                )
            )
            logger.info(f"{colored(setting, 'yellow')}: PSNR {min(means[0], PSNR_TABLE_CAP):.3f} SSIM {means[1]:.4f}")

    if cfg.out_dir is not None:
        report.write(cfg.out_dir)
    return report
