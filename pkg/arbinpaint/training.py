from __future__ import annotations

import math
import time
from pathlib import Path
from typing import Any

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from termcolor import colored
from torch import nn

from arbinpaint.adversarial import (
    Discriminator,
    DiscriminatorConfig,
    ExtractorConfig,
    FeaturePyramid,
    LossParts,
    LossWeights,
    build_extractor,
    loss_d_adv,
    loss_feature_matching,
    loss_g_adv,
    loss_perceptual,
    loss_total,
    r1_penalty,
)
from arbinpaint.checkpoint import config_fingerprint, load_archive, save_archive
from arbinpaint.core_types import composite_tensor
from arbinpaint.dataset import AtsConfig, Batch, SampleManifest, batch_iterator, steps_per_epoch
from arbinpaint.errors import TrainingAbortError, ValidationError
from arbinpaint.generator import Generator, GeneratorConfig, build_generator
from arbinpaint.maskgen import MaskSpec
from utils.log_util import logger

CHECKPOINT_NAME = "checkpoint.arb"
FINAL_NAME = "final.arb"
METRICS_NAME = "metrics.jsonl"


class TrainConfig(BaseModel):
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=3, ge=1)
    lr_init: float = Field(default=4e-5, gt=0)
    lr_max: float = Field(default=4e-4, gt=0)
    warmup_epochs: int = Field(default=15, ge=0)
    seed: int = Field(default=0, ge=0)
    betas: tuple[float, float] = (0.5, 0.999)
    r1_interval: int = Field(default=16, ge=1)
    r1_unsquared: bool = False
    grad_clip: float | None = Field(default=None, gt=0)
    checkpoint_every: int = Field(default=1000, ge=0)
    log_every: int = Field(default=50, ge=1)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    ats: AtsConfig = Field(default_factory=AtsConfig)

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def check_schedule(self) -> TrainConfig:
        if self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} must be below epochs {self.epochs}")
        if self.lr_init > self.lr_max:
            raise ValueError(f"lr_init {self.lr_init} exceeds lr_max {self.lr_max}")
        return self


class ArchitectureKey(BaseModel):
    model: GeneratorConfig
    discriminator: DiscriminatorConfig


class TrainState(BaseModel):
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    step: int = 0
    epoch: int = 0
    # next batch index inside `epoch`
    batch: int = 0
    seed: int = 0

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(ArchitectureKey(model=self.generator.cfg, discriminator=self.discriminator.cfg))


class StepMetrics(BaseModel):
    step: int
    epoch: int
    lr: float
    d_adv: float
    r1: float | None = None
    d_total: float
    g_adv: float
    per: float
    fm: float
    g_total: float
    masked_l1: float
    seconds: float = 0.0


def init_state(
    gen_cfg: GeneratorConfig | None = None,
    disc_cfg: DiscriminatorConfig | None = None,
    cfg: TrainConfig | None = None,
) -> TrainState:
    cfg = cfg or TrainConfig()
    generator = build_generator(gen_cfg, seed=cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 1)
        discriminator = Discriminator(disc_cfg)
    return TrainState(
        generator=generator,
        discriminator=discriminator,
        opt_g=torch.optim.Adam(generator.parameters(), lr=cfg.lr_init, betas=cfg.betas),
        opt_d=torch.optim.Adam(discriminator.parameters(), lr=cfg.lr_init, betas=cfg.betas),
        seed=cfg.seed,
    )


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from lr_init to lr_max, then cosine decay to 0 over the remaining epochs."""
    if step < 0:
        raise ValidationError(f"step must be non-negative, got {step}")
    epoch = step / max(steps_per_epoch, 1)
    if epoch < cfg.warmup_epochs:
        return cfg.lr_init + (cfg.lr_max - cfg.lr_init) * epoch / cfg.warmup_epochs
    progress = min((epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs), 1.0)
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _check_finite(value: torch.Tensor, part: str) -> None:
    if not torch.isfinite(value).all():
        logger.error(f"Non-finite {colored(part, 'red')} loss: {value.item()}")
        raise TrainingAbortError(f"loss part {part} is {value.item()}", part=part)


def train_step(
    state: TrainState,
    images: torch.Tensor,
    masks: torch.Tensor,
    extractor: FeaturePyramid,
    cfg: TrainConfig,
    lr: float,
) -> StepMetrics:
    """One discriminator update followed by one generator update."""
    start = time.perf_counter()
    gen, disc = state.generator, state.discriminator
    weights = cfg.loss_weights
    _set_lr(state.opt_g, lr)
    _set_lr(state.opt_d, lr)

    pred = gen(images, masks)
    fake = composite_tensor(pred, images, masks)

    disc.requires_grad_(True)
    state.opt_d.zero_grad(set_to_none=True)
    d_adv = loss_d_adv(disc(images), disc(fake.detach()))
    _check_finite(d_adv, "d_adv")
    d_total = d_adv
    r1 = None
    if weights.lambda_r1 > 0 and state.step % cfg.r1_interval == 0:
        r1 = r1_penalty(images, disc, cfg.r1_unsquared)
        _check_finite(r1, "r1")
        # lazy regularization: scaled by the interval to match the per-step expectation
        d_total = d_total + weights.lambda_r1 * cfg.r1_interval * r1
    d_total.backward()
    if cfg.grad_clip:
        nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
    state.opt_d.step()
    state.opt_d.zero_grad(set_to_none=True)

    disc.requires_grad_(False)
    try:
        state.opt_g.zero_grad(set_to_none=True)
        d_fake = disc(fake)
        zero = torch.zeros((), dtype=images.dtype)
        fm = zero
        if weights.lambda_fm > 0:
            with torch.no_grad():
                d_real = disc(images)
            fm = loss_feature_matching(d_real, d_fake)
        per = loss_perceptual(fake, images, extractor) if weights.lambda_per > 0 else zero
        parts = LossParts(adv=loss_g_adv(d_fake), per=per, fm=fm)
        g_total = loss_total(parts, weights)
        g_total.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(gen.parameters(), cfg.grad_clip)
        state.opt_g.step()
    finally:
        disc.requires_grad_(True)

    with torch.no_grad():
        masked_l1 = ((pred - images).abs() * masks).sum() / (3.0 * masks.sum()).clamp(min=1.0)

    metrics = StepMetrics(
        step=state.step,
        epoch=state.epoch,
        lr=lr,
        d_adv=d_adv.item(),
        r1=None if r1 is None else r1.item(),
        d_total=d_total.item(),
        g_adv=float(parts.adv),
        per=float(per),
        fm=float(fm),
        g_total=float(g_total),
        masked_l1=masked_l1.item(),
        seconds=time.perf_counter() - start,
    )
    state.step += 1
    return metrics


def _flatten_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]) -> dict[str, Any]:
    sd = opt.state_dict()
    scalars: dict[str, Any] = {}
    for idx, slots in sd["state"].items():
        for key, value in slots.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{prefix}/state/{idx}/{key}"] = value
            else:
                scalars[f"{idx}/{key}"] = value
    return {"param_groups": sd["param_groups"], "scalars": scalars}


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    state: dict[int, dict[str, Any]] = {}
    for name, value in tensors.items():
        if name.startswith(f"{prefix}/state/"):
            idx, key = name.removeprefix(f"{prefix}/state/").split("/", 1)
            state.setdefault(int(idx), {})[key] = value
    for name, value in meta["scalars"].items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = value
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    tensors: dict[str, torch.Tensor] = {}
    tensors.update({f"generator/{k}": v for k, v in state.generator.state_dict().items()})
    tensors.update({f"discriminator/{k}": v for k, v in state.discriminator.state_dict().items()})
    meta: dict[str, Any] = {
        "step": state.step,
        "epoch": state.epoch,
        "batch": state.batch,
        "opt_g": _flatten_optimizer("opt_g", state.opt_g, tensors),
        "opt_d": _flatten_optimizer("opt_d", state.opt_d, tensors),
    }
    tensors["rng/torch"] = torch.get_rng_state()
    return save_archive(path, tensors, "train_state", state.fingerprint, state.seed, meta)


def _section(tensors: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    return {k.removeprefix(prefix): v for k, v in tensors.items() if k.startswith(prefix)}


def load_checkpoint(path: str | Path, state: TrainState) -> TrainState:
    """Restores `path` into a freshly initialised state built from the same configuration."""
    archive = load_archive(path).require("train_state", state.fingerprint)
    tensors, meta = archive.tensors, archive.meta
    state.generator.load_state_dict(_section(tensors, "generator/"))
    state.discriminator.load_state_dict(_section(tensors, "discriminator/"))
    _restore_optimizer("opt_g", state.opt_g, tensors, meta["opt_g"])
    _restore_optimizer("opt_d", state.opt_d, tensors, meta["opt_d"])
    torch.set_rng_state(tensors["rng/torch"])
    state.step, state.epoch, state.batch = meta["step"], meta["epoch"], meta["batch"]
    state.seed = archive.header.seed
    logger.info(f"Resumed from {colored(str(path), 'light_cyan')} at step {state.step} (epoch {state.epoch})")
    return state


def load_generator(path: str | Path, cfg: GeneratorConfig) -> Generator:
    """Generator weights from either a training checkpoint or a generator-only archive."""
    archive = load_archive(path)
    generator = Generator(cfg)
    if archive.header.kind == "generator":
        archive.require("generator", config_fingerprint(cfg))
        generator.load_state_dict(archive.tensors)
    else:
        archive.require("train_state")
        stored = _section(archive.tensors, "generator/")
        try:
            generator.load_state_dict(stored)
        except RuntimeError as e:
            raise ValidationError(f"{path} does not match the configured generator: {e}") from e
    generator.eval()
    return generator


def save_generator(generator: Generator, path: str | Path, seed: int = 0) -> Path:
    return save_archive(path, generator.state_dict(), "generator", config_fingerprint(generator.cfg), seed)


def to_batch_tensors(batch: Batch, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(batch.images).permute(0, 3, 1, 2).to(dtype)
    masks = torch.from_numpy(batch.masks)[:, None].to(dtype)
    return images.contiguous(), masks.contiguous()


class Trainer:
    def __init__(
        self,
        cfg: TrainConfig,
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        extractor_cfg: ExtractorConfig,
        mask_spec: MaskSpec,
        out_dir: str | Path,
    ):
        self.cfg = cfg
        self.mask_spec = mask_spec
        self.out_dir = Path(out_dir)
        self.state = init_state(gen_cfg, disc_cfg, cfg)
        self.extractor = build_extractor(extractor_cfg)
        self.last_checkpoint: Path | None = None
        self.history: list[StepMetrics] = []

    def resume(self, path: str | Path) -> None:
        load_checkpoint(path, self.state)
        self.last_checkpoint = Path(path)

    def checkpoint(self) -> Path:
        self.last_checkpoint = save_checkpoint(self.state, self.out_dir / CHECKPOINT_NAME)
        return self.last_checkpoint

    def fit(self, manifest: SampleManifest, max_steps: int | None = None) -> Path:
        """Runs the remaining epochs and returns the final checkpoint path."""
        if not manifest.entries:
            raise ValidationError("cannot train on an empty manifest")
        per_epoch = steps_per_epoch(manifest, self.cfg.batch_size)
        if per_epoch == 0:
            raise ValidationError(f"no dims group holds a full batch of {self.cfg.batch_size}")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        state = self.state

        logger.info(
            f"Training for {colored(str(self.cfg.epochs), 'yellow')} epochs of {per_epoch} steps "
            f"from step {state.step}"
        )
        with open(self.out_dir / METRICS_NAME, "a") as metrics_log:
            while state.epoch < self.cfg.epochs:
                batches = batch_iterator(
                    manifest,
                    self.mask_spec,
                    self.cfg.batch_size,
                    self.cfg.seed,
                    epoch=state.epoch,
                    ats=self.cfg.ats,
                    start=state.batch,
                )
                for batch in batches:
                    if max_steps is not None and state.step >= max_steps:
                        return self.checkpoint()
                    images, masks = to_batch_tensors(batch)
                    lr = lr_schedule(state.step, per_epoch, self.cfg)
                    try:
                        metrics = train_step(state, images, masks, self.extractor, self.cfg, lr)
                    except TrainingAbortError as e:
                        raise TrainingAbortError(
                            e.reason, part=e.part, last_checkpoint=self.last_checkpoint
                        ) from e
                    state.batch += 1
                    self.history.append(metrics)
                    metrics_log.write(metrics.model_dump_json() + "\n")

                    if metrics.step % self.cfg.log_every == 0:
                        logger.info(
                            f"step {metrics.step} epoch {metrics.epoch} lr {metrics.lr:.2e} "
                            f"g {metrics.g_total:.4f} d {metrics.d_total:.4f} l1 {metrics.masked_l1:.4f}"
                        )
                    if self.cfg.checkpoint_every and state.step % self.cfg.checkpoint_every == 0:
                        self.checkpoint()
                state.epoch += 1
                state.batch = 0

        final = save_checkpoint(state, self.out_dir / FINAL_NAME)
        self.last_checkpoint = final
        logger.info(f"Final checkpoint written to {colored(str(final), 'light_cyan')}")
        return final
