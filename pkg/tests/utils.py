from pathlib import Path

import numpy as np
import torch

from arbinpaint.adversarial import DiscriminatorConfig, ExtractorConfig
from arbinpaint.core_types import Image, Mask, derive_rng, quantize, save_image
from arbinpaint.dataset import AtsConfig, ManifestEntry, SampleManifest
from arbinpaint.generator import GeneratorConfig
from arbinpaint.primitives import NabConfig
from arbinpaint.training import TrainConfig


def create_image(h: int, w: int, seed: int = 0) -> Image:
    """Smooth low-frequency RGB pattern on the 8-bit grid."""
    rng = derive_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    channels = []
    for _ in range(3):
        fy, fx, phase = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        channels.append(0.5 + 0.4 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase))
    return quantize(np.stack(channels, axis=-1).astype(np.float32))


def create_mask(h: int, w: int) -> Mask:
    mask = np.zeros((h, w), dtype=np.float32)
    mask[h // 4 : h // 2, w // 4 : (3 * w) // 4] = 1.0
    return mask


def create_generator_config(**overrides) -> GeneratorConfig:
    values = dict(
        encoder_channels=[8, 16, 16],
        decoder_channels=[16, 16, 16],
        decoder_hidden=16,
        nhab_groups=1,
        nhab_per_group=2,
        nab=NabConfig(kernel=3, heads=2),
    )
    values.update(overrides)
    return GeneratorConfig(**values)


def create_disc_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(base_channels=8)


def create_extractor_config() -> ExtractorConfig:
    return ExtractorConfig(channels=[8, 16])


def create_train_config(**overrides) -> TrainConfig:
    values = dict(
        epochs=1,
        batch_size=3,
        warmup_epochs=0,
        checkpoint_every=0,
        log_every=1,
        ats=AtsConfig(target_area=48 * 48),
    )
    values.update(overrides)
    return TrainConfig(**values)


def write_images(directory: Path, n: int, h: int, w: int, seed: int = 0) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        path = directory / f"img_{i:03d}.png"
        save_image(create_image(h, w, seed + i), path)
        paths.append(path)
    return paths


def create_manifest(directory: Path, n: int, h: int = 64, w: int = 64, seed: int = 0) -> SampleManifest:
    paths = write_images(directory, n, h, w, seed)
    return SampleManifest(
        entries=[ManifestEntry(image=p, mask_seed=seed + i, height=h, width=w) for i, p in enumerate(paths)]
    )


def batch_tensors(n: int, h: int, w: int, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.stack([torch.from_numpy(create_image(h, w, seed + i)).permute(2, 0, 1) for i in range(n)])
    masks = torch.from_numpy(create_mask(h, w))[None, None].expand(n, 1, h, w).contiguous()
    return images, masks
