"""Masked-conditioning VAE for structured 2D point clouds.

The encoder never sees conditions. The decoder consumes ``[z; e_y]`` where
``e_y`` is the (possibly masked) condition embedding, and the KL term is taken
on ``z`` alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .conditions import ConditionEmbedder, ConditionSchema, ConditionVector, mask_arrays, to_arrays
from .data import PointCloudDataset
from .errors import DivergenceDetected, NonFiniteInput, SchemaMismatch
from .schedules import SparsitySchedule

__all__ = [
    "VaeConfig",
    "McVae",
    "TrainingReport",
    "reparameterize",
    "elbo_loss",
    "train_vae",
    "generate",
    "fan_uniform_",
]


@dataclass
class VaeConfig:
    num_keypoints: int = 6
    d_z: int = 2
    keypoint_embedding_dim: int = 64
    encoder_hidden: tuple[int, ...] = (64,)
    decoder_hidden: tuple[int, ...] = (64, 64)
    beta: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 140
    epochs: int = 300

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        dims = (self.num_keypoints, self.d_z, self.keypoint_embedding_dim, self.batch_size, self.epochs)
        if min(dims + self.encoder_hidden + self.decoder_hidden) < 1:
            raise ValueError("all VAE dimensions and training counts must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")

    @classmethod
    def geobiked(cls, d_z: int = 8) -> "VaeConfig":
        """Published GeoBiked hyperparameters; the latent size is not published."""
        return cls(num_keypoints=12, d_z=d_z, keypoint_embedding_dim=203, batch_size=140, epochs=393)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VaeConfig":
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


@torch.no_grad()
def fan_uniform_(layer: nn.Linear, generator: torch.Generator | None = None) -> nn.Linear:
    """Zero-mean uniform init with half-width ``1/sqrt(fan_in)``."""
    bound = 1.0 / math.sqrt(layer.in_features)
    layer.weight.uniform_(-bound, bound, generator=generator)
    if layer.bias is not None:
        layer.bias.uniform_(-bound, bound, generator=generator)
    return layer


def _mlp(widths: Sequence[int], generator) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(fan_uniform_(nn.Linear(a, b), generator))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class McVae(nn.Module):
    def __init__(self, config: VaeConfig, schema: ConditionSchema, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.schema = schema
        dim_x = 2 * config.num_keypoints
        self.embedder = ConditionEmbedder(schema, generator)
        self.encoder = _mlp(
            [dim_x, config.keypoint_embedding_dim, *config.encoder_hidden, 2 * config.d_z], generator
        )
        self.decoder = _mlp([config.d_z + schema.d_y, *config.decoder_hidden, dim_x], generator)
        assert self.decoder[0].in_features == config.d_z + schema.d_y
        self.register_buffer("data_mean", torch.zeros(dim_x))
        self.register_buffer("data_std", torch.ones(dim_x))

    @property
    def d_z(self) -> int:
        return self.config.d_z

    def set_standardization(self, mean, std) -> None:
        self.data_mean.copy_(torch.as_tensor(np.asarray(mean), dtype=self.data_mean.dtype))
        self.data_std.copy_(torch.as_tensor(np.asarray(std), dtype=self.data_std.dtype))

    def standardize(self, x: Tensor) -> Tensor:
        return (x - self.data_mean) / self.data_std

    def destandardize(self, x: Tensor) -> Tensor:
        return x * self.data_std + self.data_mean

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Posterior parameters ``(mu, logvar)`` for standardized keypoints ``x``."""
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteInput("encoder input contains non-finite values")
        h = self.encoder(x)
        return h[..., : self.d_z], h[..., self.d_z :]

    def decode(self, z: Tensor, cat, num) -> Tensor:
        e_y = self.embedder(cat, num)
        if e_y.shape[0] != z.shape[0]:
            raise SchemaMismatch(f"{z.shape[0]} latents but {e_y.shape[0]} condition rows")
        return self.decoder(torch.cat([z, e_y], dim=1))

    def decode_one(self, z: Tensor, cv: ConditionVector) -> Tensor:
        cv.check(self.schema)
        return self.decoder(torch.cat([z, self.embedder.embed(cv)]))

    def loss(self, x: Tensor, cat, num, eps: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """ELBO terms for standardized ``x`` with a fixed noise draw ``eps``."""
        mu, logvar = self.encode(x)
        z = mu + torch.exp(0.5 * logvar) * eps
        x_hat = self.decode(z, cat, num)
        return elbo_loss(x, x_hat, mu, logvar, self.config.beta)


def reparameterize(
    mu: Tensor, logvar: Tensor, generator: torch.Generator | None = None, eps: Tensor | None = None
) -> Tensor:
    if eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * eps


def elbo_loss(x: Tensor, x_hat: Tensor, mu: Tensor, logvar: Tensor, beta: float) -> tuple[Tensor, Tensor, Tensor]:
    """Negative ELBO split into ``(recon, kl, total)``.

    ``recon`` is the mean squared error over coordinates (and batch), ``kl`` the
    closed-form Gaussian KL summed over latent dimensions and averaged over the
    batch. Only the latent enters ``kl``.
    """
    recon = torch.mean((x_hat - x) ** 2)
    kl_per = 0.5 * torch.sum(mu**2 + torch.exp(logvar) - 1.0 - logvar, dim=-1)
    kl = torch.mean(kl_per)
    return recon, kl, recon + beta * kl


@dataclass
class TrainingReport:
    """Per-update training log; one row per gradient update."""

    columns: tuple[str, ...] = ("epoch", "step", "p_t", "recon", "kl", "total")
    rows: list[tuple] = field(default_factory=list)

    def append(self, *row) -> None:
        self.rows.append(tuple(row))

    @property
    def p_trace(self) -> np.ndarray:
        i = self.columns.index("p_t")
        return np.array([r[i] for r in self.rows])

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def per_epoch(self) -> list[dict[str, float]]:
        """Mean of every loss column per epoch."""
        if "epoch" not in self.columns:
            return []
        ep = self.column("epoch")
        out = []
        for e in np.unique(ep):
            sel = ep == e
            out.append(
                {"epoch": int(e)}
                | {c: float(self.column(c)[sel].mean()) for c in self.columns if c not in ("epoch", "step", "p_t")}
            )
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])


def plan_schedule(schedule: SparsitySchedule, num_updates: int) -> SparsitySchedule:
    """Bind a schedule to a run of ``num_updates`` gradient updates.

    Update ``k`` (0-based) queries ``t = k`` on a horizon ``T = num_updates - 1``
    so the first update sees ``p_start`` and the last one sees ``f(T)``.
    """
    return schedule.with_total_steps(max(num_updates - 1, 1))


def _torch_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**62))


def train_vae(
    model: McVae,
    dataset: PointCloudDataset,
    config: VaeConfig,
    schedule: SparsitySchedule,
    rng: np.random.Generator,
    on_step=None,
) -> TrainingReport:
    """Train ``model`` in place; standardization comes from ``dataset`` (or is computed)."""
    if dataset.schema.to_dict() != model.schema.to_dict():
        raise SchemaMismatch("dataset schema differs from the model's condition schema")
    if dataset.mean is None:
        dataset = dataset.with_stats(*dataset.compute_stats())
    model.set_standardization(dataset.mean, dataset.std)
    dtype = model.data_mean.dtype
    x_all = model.standardize(torch.as_tensor(dataset.keypoints, dtype=dtype))
    n = len(dataset)
    per_epoch = math.ceil(n / config.batch_size)
    sched = plan_schedule(schedule, per_epoch * config.epochs)
    gen = torch.Generator().manual_seed(_torch_seed(rng))
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    report = TrainingReport()
    model.train()
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for b in range(per_epoch):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            p_t = sched(step)
            cat, num = mask_arrays(dataset.cat[idx], dataset.num[idx], p_t, rng)
            x = x_all[idx]
            eps = torch.randn((len(idx), config.d_z), generator=gen, dtype=dtype)
            recon, kl, total = model.loss(x, cat, num, eps)
            if not bool(torch.isfinite(total)):
                raise DivergenceDetected(step)
            opt.zero_grad()
            total.backward()
            opt.step()
            report.append(epoch, step, p_t, recon.item(), kl.item(), total.item())
            if on_step is not None:
                on_step(step, report.rows[-1])
            step += 1
    model.eval()
    return report


@torch.no_grad()
def generate(
    model: McVae,
    conditions,
    rng: np.random.Generator,
    mode: str = "prior",
    x_ref=None,
) -> np.ndarray:
    """Generate keypoints in data units.

    ``conditions`` is a :class:`ConditionVector`, a list of them, or a
    ``(cat, num)`` array pair. ``mode="posterior"`` draws the latent from the
    encoder posterior of ``x_ref`` (data units, one row per condition row).
    """
    single = isinstance(conditions, ConditionVector)
    if single:
        conditions = [conditions]
    if isinstance(conditions, (list, tuple)) and conditions and isinstance(conditions[0], ConditionVector):
        cat, num = to_arrays(conditions, model.schema)
    else:
        cat, num = conditions
    dtype = model.data_mean.dtype
    n = len(cat)
    gen = torch.Generator().manual_seed(_torch_seed(rng))
    eps = torch.randn((n, model.d_z), generator=gen, dtype=dtype)
    if mode == "prior":
        z = eps
    elif mode == "posterior":
        if x_ref is None:
            raise ValueError("posterior mode needs a reference sample x_ref")
        x = torch.as_tensor(np.asarray(x_ref, dtype=np.float64).reshape(n, -1), dtype=dtype)
        mu, logvar = model.encode(model.standardize(x))
        z = reparameterize(mu, logvar, eps=eps)
    else:
        raise ValueError(f"unknown generation mode {mode!r}")
    out = model.destandardize(model.decode(z, cat, num)).double().numpy()
    return out[0] if single else out
