from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from functools import lru_cache

import torch
import torch.nn.functional as F
from einops import rearrange
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn

from arbinpaint.errors import ConfigError, ValidationError
from utils.log_util import logger


class NabConfig(BaseModel):
    kernel: int = Field(default=7, ge=1)
    heads: int = Field(default=4, ge=1)
    # None derives it from the feature channels
    channels_per_head: int | None = Field(default=None, ge=1)

    model_config = ConfigDict(extra="forbid")

    @field_validator("kernel")
    @classmethod
    def check_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError(f"neighborhood kernel must be odd, got {v}")
        return v

    def check_channels(self, channels: int) -> None:
        if channels % self.heads != 0:
            raise ConfigError(f"{channels} channels do not split into {self.heads} heads")
        if self.channels_per_head is not None and self.channels_per_head * self.heads != channels:
            raise ConfigError(f"{self.heads} heads x {self.channels_per_head} channels != {channels} channels")


def real_spectrum(x: torch.Tensor) -> torch.Tensor:
    """Real 2-D FFT over (h, w) with the real and imaginary parts stacked on the channel axis."""
    ft = torch.fft.rfft2(x, dim=(-2, -1), norm="ortho")
    return torch.cat([ft.real, ft.imag], dim=1)


def inverse_spectrum(spec: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    real, imag = spec.chunk(2, dim=1)
    return torch.fft.irfft2(torch.complex(real, imag), s=size, dim=(-2, -1), norm="ortho")


class SpectralTransform(nn.Module):
    """Pointwise map in the frequency domain: rfft2 -> 1x1 conv over (real, imag) -> GELU -> irfft2."""

    def __init__(self, channels: int, activate: bool = True):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(2 * channels, 2 * channels, kernel_size=1)
        self.act = nn.GELU() if activate else nn.Identity()

    def identity_(self) -> SpectralTransform:
        with torch.no_grad():
            self.conv.weight.copy_(torch.eye(2 * self.channels).view(2 * self.channels, 2 * self.channels, 1, 1))
            self.conv.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if torch.isnan(x).any():
            raise ValidationError("spectral transform input contains NaN")
        h, w = x.shape[-2:]
        return inverse_spectrum(self.act(self.conv(real_spectrum(x))), (h, w))


class FfcBlock(nn.Module):
    """Fast Fourier convolution over a (local, global) channel split.

    The first `channels - global` channels form the local branch. Output channels keep the same split:
    local = l2l(xl) + g2l(xg), global = l2g(xl) + g2g(xg), then one GroupNorm and GELU over all channels.
    """

    def __init__(self, channels: int, global_ratio: float = 0.25):
        super().__init__()
        n_global = channels * global_ratio
        if not 0.0 <= global_ratio < 1.0 or not float(n_global).is_integer():
            raise ValidationError(f"global ratio {global_ratio} does not split {channels} channels evenly")
        self.n_global = int(n_global)
        self.n_local = channels - self.n_global

        cl, cg = self.n_local, self.n_global
        self.l2l = nn.Conv2d(cl, cl, 3, padding=1)
        if cg > 0:
            self.l2g = nn.Conv2d(cl, cg, 3, padding=1)
            self.g2l = nn.Conv2d(cg, cl, 3, padding=1)
            self.g2g = SpectralTransform(cg)
        self.norm = nn.GroupNorm(1, channels)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.n_global == 0:
            return self.act(self.norm(self.l2l(x)))
        xl, xg = x.split([self.n_local, self.n_global], dim=1)
        out_l = self.l2l(xl) + self.g2l(xg)
        out_g = self.l2g(xl) + self.g2g(xg)
        return self.act(self.norm(torch.cat([out_l, out_g], dim=1)))


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels < reduction:
            raise ValidationError(f"channel attention needs channels >= reduction, got {channels} < {reduction}")
        hidden = max(channels // reduction, 1)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Conv2d(channels, hidden, kernel_size=1)
        self.fc2 = nn.Conv2d(hidden, channels, kernel_size=1)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(F.relu(self.fc1(self.pool(x)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


@lru_cache(maxsize=32)
def neighborhood_index(h: int, w: int, kernel: int) -> torch.Tensor:
    """(h*w, kh*kw) flat key indices; windows shift inward at the borders so each query keeps kh*kw keys."""
    kh, kw = min(kernel, h), min(kernel, w)
    rows = torch.arange(h)
    cols = torch.arange(w)
    top = (rows - kernel // 2).clamp(0, h - kh)
    left = (cols - kernel // 2).clamp(0, w - kw)
    win_rows = top[:, None] + torch.arange(kh)[None, :]  # h x kh
    win_cols = left[:, None] + torch.arange(kw)[None, :]  # w x kw
    flat = win_rows[:, None, :, None] * w + win_cols[None, :, None, :]  # h x w x kh x kw
    return flat.reshape(h * w, kh * kw)


class NeighborhoodAttention(nn.Module):
    def __init__(self, channels: int, cfg: NabConfig | None = None, kernel: int | None = None):
        super().__init__()
        cfg = cfg or NabConfig()
        self.kernel = kernel if kernel is not None else cfg.kernel
        if self.kernel % 2 == 0:
            raise ConfigError(f"neighborhood kernel must be odd, got {self.kernel}")
        cfg.check_channels(channels)
        self.heads = cfg.heads
        self.scale = (channels // cfg.heads) ** -0.5
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

        self.keep_attention = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        index = neighborhood_index(h, w, self.kernel).to(x.device)

        tokens = rearrange(x, "b c h w -> b (h w) c")
        q, k, v = rearrange(self.qkv(tokens), "b n (three m d) -> three b m n d", three=3, m=self.heads)
        k_nb = k[:, :, index]  # b m n K d
        v_nb = v[:, :, index]

        logits = torch.einsum("bmnd,bmnkd->bmnk", q, k_nb) * self.scale
        logits = logits - logits.amax(dim=-1, keepdim=True).detach()
        attn = logits.softmax(dim=-1)
        if self.keep_attention:
            self.last_attention = attn.detach()

        out = torch.einsum("bmnk,bmnkd->bmnd", attn, v_nb)
        out = self.proj(rearrange(out, "b m n d -> b n (m d)"))
        return rearrange(out, "b (h w) c -> b c h w", h=h, w=w)


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel axis of an NCHW map."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return rearrange(super().forward(rearrange(x, "b c h w -> b h w c")), "b h w c -> b c h w")


class Mlp(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, out_dim or in_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class GradCheckReport(BaseModel):
    passed: bool
    max_rel_error: float
    worst: str
    checked: int
    failures: list[str] = Field(default_factory=list)

    def __str__(self) -> str:
        status = "passed" if self.passed else f"failed on {', '.join(self.failures)}"
        return f"grad check {status}: max rel error {self.max_rel_error:.3e} at {self.worst} over {self.checked} probes"


def grad_check(
    fn: nn.Module | Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    probe: Sequence[str] | None = None,
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-3,
    n_probe: int = 10,
    seed: int = 0,
) -> GradCheckReport:
    """Central finite differences against autograd for a fixed random projection of fn(*inputs).

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor). `probe` restricts the
    checked parameters by name; inputs that require grad are checked as `input{i}`.
    """
    gen = torch.Generator().manual_seed(seed)
    named: list[tuple[str, torch.Tensor]] = []
    if isinstance(fn, nn.Module):
        named = [(n, p) for n, p in fn.named_parameters() if p.requires_grad and (probe is None or n in probe)]
    named += [(f"input{i}", t) for i, t in enumerate(inputs) if t.requires_grad]
    if not named:
        raise ValidationError("grad check has nothing to probe")

    out = fn(*inputs)
    projection = torch.randn(out.shape, generator=gen, dtype=torch.float64).to(out.dtype)

    def scalar() -> torch.Tensor:
        return (fn(*inputs) * projection).sum()

    analytic = torch.autograd.grad((out * projection).sum(), [t for _, t in named], allow_unused=True)

    worst, max_rel, checked = "", 0.0, 0
    failures: list[str] = []
    for (name, t), grad in zip(named, analytic, strict=True):
        grad_flat = torch.zeros_like(t).reshape(-1) if grad is None else grad.reshape(-1)
        picks = torch.randperm(t.numel(), generator=gen)[:n_probe]
        for i in picks.tolist():
            # positional index; t may be non-contiguous
            at = tuple(int(k) for k in torch.unravel_index(torch.tensor(i), t.shape))
            with torch.no_grad():
                orig = t[at].item()
                t[at] = orig + eps
                plus = scalar().item()
                t[at] = orig - eps
                minus = scalar().item()
                t[at] = orig
            numeric = (plus - minus) / (2 * eps)
            a = grad_flat[i].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if rel > max_rel or not math.isfinite(rel):
                max_rel, worst = rel, f"{name}[{i}]"
            if not rel <= tol and name not in failures:
                failures.append(name)

    report = GradCheckReport(passed=not failures, max_rel_error=max_rel, worst=worst, checked=checked, failures=failures)
    logger.debug(str(report))
    return report
