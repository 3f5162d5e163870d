"""Desk-scale masked-conditioning diffusion model in pixel space.

At every U-Net resolution level the condition embedding ``e_y`` is reduced by
a level-specific linear layer, batch-normalized, repeated over the feature map
and concatenated to the input of that level's first residual block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .conditions import ConditionEmbedder, ConditionSchema, ConditionVector, mask_arrays, to_arrays
from .data import ImageDataset
from .errors import DivergenceDetected, InvalidScheduleBounds, SchemaMismatch, ShapeMismatch, TimestepOutOfRange
from .mcvae import TrainingReport, _torch_seed, plan_schedule
from .schedules import SparsitySchedule

__all__ = [
    "DiffusionConfig",
    "NoiseSchedule",
    "ConditionInjector",
    "ResBlock",
    "McDiffusion",
    "init_noise_schedule",
    "q_sample",
    "inject_conditions",
    "diffusion_loss",
    "train_dm",
    "sample",
]


@dataclass
class DiffusionConfig:
    image_shape: tuple[int, int, int] = (1, 32, 32)
    T_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    unet_levels: int = 3
    base_channels: int = 16
    d_c: int = 8
    attention_heads: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 8
    train_steps: int = 5000
    zero_init_output: bool = False

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        C, H, W = self.image_shape
        f = 2 ** (self.unet_levels - 1)
        if self.unet_levels < 1 or H % f or W % f:
            raise ShapeMismatch(f"image {H}x{W} is not divisible by 2^(levels-1) = {f}")
        if not 0 < self.beta_min < self.beta_max < 1:
            raise InvalidScheduleBounds(f"need 0 < beta_min < beta_max < 1, got {self.beta_min}, {self.beta_max}")
        if min(self.T_steps, self.base_channels, self.d_c, self.batch_size, C) < 1:
            raise ValueError("diffusion dimensions and counts must be positive")
        if self.attention_heads < 0:
            raise ValueError("attention_heads must be nonnegative")

    def level_channels(self, level: int) -> int:
        return self.base_channels * (1 if level == 0 else 2)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DiffusionConfig":
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; arrays are indexed by ``t - 1`` for ``t = 1 .. T``."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise TimestepOutOfRange(f"timestep outside [1, {self.T}]")
        return self.alpha_bars[t - 1]


def init_noise_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    if not 0 < cfg.beta_min < cfg.beta_max < 1:
        raise InvalidScheduleBounds(f"need 0 < beta_min < beta_max < 1, got {cfg.beta_min}, {cfg.beta_max}")
    betas = np.linspace(cfg.beta_min, cfg.beta_max, cfg.T_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def q_sample(x0: Tensor, t, eps: Tensor, ns: NoiseSchedule) -> Tensor:
    """Forward process ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` scalar or per batch row."""
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    t_arr = np.asarray(t.cpu() if isinstance(t, Tensor) else t, dtype=np.int64)
    ab = torch.as_tensor(ns.alpha_bar(t_arr), dtype=x0.dtype, device=x0.device)
    if ab.ndim == 1:
        ab = ab.view(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def _groups(ch: int) -> int:
    # at least 4 channels per group, otherwise a per-channel shift (the timestep
    # embedding) would be normalized away
    for g in (8, 4, 2):
        if ch % g == 0 and ch // g >= 4:
            return g
    return 1


class ConditionInjector(nn.Module):
    """Linear reduction ``d_y -> d_c`` followed by batch normalization."""

    def __init__(self, d_y: int, d_c: int):
        super().__init__()
        self.reduce = nn.Linear(d_y, d_c)
        self.norm = nn.BatchNorm1d(d_c, momentum=0.1)

    def forward(self, e_y: Tensor, fm_shape: tuple[int, int]) -> Tensor:
        if e_y.ndim != 2 or e_y.shape[1] != self.reduce.in_features:
            raise ShapeMismatch(f"expected e_y of shape (b, {self.reduce.in_features}), got {tuple(e_y.shape)}")
        e_c = self.norm(self.reduce(e_y))
        return e_c[:, :, None, None].expand(-1, -1, *fm_shape)


def inject_conditions(
    inj: ConditionInjector, e_y: Tensor, fm_shape: tuple[int, int], training: bool = False
) -> Tensor:
    """Broadcast tensor ``(b, d_c, H_fm, W_fm)``; ``training`` picks batch vs running statistics."""
    was = inj.training
    inj.train(training)
    try:
        return inj(e_y, fm_shape)
    finally:
        inj.train(was)


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.in_ch = in_ch
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(seq, seq, seq, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class McDiffusion(nn.Module):
    def __init__(self, config: DiffusionConfig, schema: ConditionSchema, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.schema = schema
        self.noise = init_noise_schedule(config)
        C = config.image_shape[0]
        L = config.unet_levels
        base = config.base_channels
        self.temb_in = base
        temb_dim = 4 * base
        self.embedder = ConditionEmbedder(schema, generator)
        self.time_mlp = nn.Sequential(nn.Linear(base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.injectors = nn.ModuleList([ConditionInjector(schema.d_y, config.d_c) for _ in range(L)])
        self.conv_in = nn.Conv2d(C, base, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skip_ch = []
        ch = base
        for level in range(L):
            out = config.level_channels(level)
            self.down_blocks.append(ResBlock(ch + config.d_c, out, temb_dim))
            ch = out
            skip_ch.append(ch)
            if level < L - 1:
                self.downsamplers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = ResBlock(ch, ch, temb_dim)
        self.mid_attn = SelfAttention(ch, config.attention_heads) if config.attention_heads else None

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level in reversed(range(L)):
            out = config.level_channels(level)
            self.up_blocks.append(ResBlock(ch + skip_ch[level], out, temb_dim))
            ch = out
            if level > 0:
                self.upsamplers.append(nn.Conv2d(ch, ch, 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, C, 3, padding=1)

        self._init_weights(generator)
        if config.zero_init_output:
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)
        self.check_channel_arithmetic()

    @torch.no_grad()
    def _init_weights(self, generator) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)) and not isinstance(m, nn.MultiheadAttention):
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)

    def check_channel_arithmetic(self) -> None:
        ch = self.config.base_channels
        for level, block in enumerate(self.down_blocks):
            expected = ch + self.config.d_c
            if block.in_ch != expected or block.conv1.in_channels != expected:
                raise ShapeMismatch(f"level {level}: first block takes {block.in_ch} channels, expected {expected}")
            ch = self.config.level_channels(level)

    def forward(self, x_t: Tensor, t, cat, num) -> Tensor:
        """Predicted noise for ``x_t`` at timesteps ``t`` (1-based) under conditions ``(cat, num)``."""
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != self.config.image_shape:
            raise ShapeMismatch(f"expected (b, {self.config.image_shape}), got {tuple(x_t.shape)}")
        b = x_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(b) if np.ndim(t) == 0 else torch.as_tensor(t)
        if bool((t < 1).any()) or bool((t > self.config.T_steps).any()):
            raise TimestepOutOfRange(f"timestep outside [1, {self.config.T_steps}]")
        temb = self.time_mlp(timestep_embedding(t, self.temb_in).to(x_t.dtype))
        e_y = self.embedder(cat, num)
        if e_y.shape[0] != b:
            raise ShapeMismatch(f"{b} images but {e_y.shape[0]} condition rows")

        h = self.conv_in(x_t)
        skips = []
        for level, block in enumerate(self.down_blocks):
            e_c = self.injectors[level](e_y, h.shape[-2:])
            h = block(torch.cat([h, e_c], dim=1), temb)
            skips.append(h)
            if level < len(self.downsamplers):
                h = self.downsamplers[level](h)
        h = self.mid(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        for i, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if i < len(self.upsamplers):
                h = self.upsamplers[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))

    def predict_noise(self, z_t: Tensor, t, cv: ConditionVector | tuple) -> Tensor:
        if isinstance(cv, ConditionVector):
            cat, num = to_arrays([cv] * z_t.shape[0], self.schema)
        else:
            cat, num = cv
        return self(z_t, t, cat, num)


def diffusion_loss(model: McDiffusion, x0: Tensor, cat, num, t, eps: Tensor) -> Tensor:
    """Mean squared error between ``eps`` and the model's prediction at ``q_sample(x0, t, eps)``."""
    x_t = q_sample(x0, t, eps, model.noise)
    return torch.mean((eps - model(x_t, t, cat, num)) ** 2)


def to_model_range(images: np.ndarray) -> np.ndarray:
    return images * 2.0 - 1.0


def to_pixel_range(x) -> np.ndarray:
    return (np.asarray(x) + 1.0) / 2.0


def train_dm(
    model: McDiffusion,
    dataset: ImageDataset,
    cfg: DiffusionConfig,
    schedule: SparsitySchedule,
    rng: np.random.Generator,
    on_step=None,
) -> TrainingReport:
    if dataset.schema.to_dict() != model.schema.to_dict():
        raise SchemaMismatch("dataset schema differs from the model's condition schema")
    if dataset.image_shape != cfg.image_shape:
        raise ShapeMismatch(f"dataset images {dataset.image_shape} vs configured {cfg.image_shape}")
    dtype = next(model.parameters()).dtype
    x_all = torch.as_tensor(to_model_range(dataset.images), dtype=dtype)
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    sched = plan_schedule(schedule, cfg.train_steps)
    gen = torch.Generator().manual_seed(_torch_seed(rng))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    report = TrainingReport(columns=("step", "p_t", "loss"))
    model.train()
    perm, pos = rng.permutation(n), 0
    for step in range(cfg.train_steps):
        if pos + bs > n:
            perm, pos = rng.permutation(n), 0
        idx = perm[pos : pos + bs]
        pos += bs
        p_t = sched(step)
        cat, num = mask_arrays(dataset.cat[idx], dataset.num[idx], p_t, rng)
        t = torch.randint(1, cfg.T_steps + 1, (bs,), generator=gen)
        eps = torch.randn((bs, *cfg.image_shape), generator=gen, dtype=dtype)
        loss = diffusion_loss(model, x_all[idx], cat, num, t, eps)
        if not bool(torch.isfinite(loss)):
            raise DivergenceDetected(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        report.append(step, p_t, loss.item())
        if on_step is not None:
            on_step(step, report.rows[-1])
    model.eval()
    return report


@torch.no_grad()
def sample(model: McDiffusion, conditions, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling from ``t = T`` down to 1.

    Returns images in ``[0, 1]`` pixel units, shape ``(b, C, H, W)`` (or
    ``(C, H, W)`` for a single :class:`ConditionVector`).
    """
    single = isinstance(conditions, ConditionVector)
    if single:
        conditions = [conditions]
    if isinstance(conditions, (list, tuple)) and conditions and isinstance(conditions[0], ConditionVector):
        cat, num = to_arrays(conditions, model.schema)
    else:
        cat, num = conditions
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    b = len(cat)
    ns = model.noise
    gen = torch.Generator().manual_seed(_torch_seed(rng))
    x = torch.randn((b, *model.config.image_shape), generator=gen, dtype=dtype)
    for t in range(ns.T, 0, -1):
        eps_hat = model(x, t, cat, num)
        beta, alpha, ab = ns.betas[t - 1], ns.alphas[t - 1], ns.alpha_bars[t - 1]
        x = (x - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
        if t > 1:
            x = x + math.sqrt(beta) * torch.randn(x.shape, generator=gen, dtype=dtype)
    model.train(was)
    out = to_pixel_range(x.clamp(-1.0, 1.0).double().numpy())
    return out[0] if single else out
