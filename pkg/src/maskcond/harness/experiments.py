"""Sparsity sweeps, dataset-size sweeps and schedule comparisons."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import torch
from scipy.stats import spearmanr

from ..conditions import mask_arrays
from ..data import ImageDataset, PointCloudDataset, split
from ..errors import SchemaMismatch, SizeTooLarge
from ..mcdm import McDiffusion, sample
from ..mcvae import McVae, VaeConfig, generate, train_vae
from ..schedules import SparsitySchedule

__all__ = [
    "SweepResult",
    "PUBLISHED_REFERENCE",
    "DEFAULT_LEVELS",
    "eval_mse_vs_sparsity",
    "per_seed_mse",
    "sweep_dataset_size",
    "compare_schedules",
    "train_fresh_vae",
]

DEFAULT_LEVELS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# Published GeoBiked numbers, emitted next to results for comparison only.
PUBLISHED_REFERENCE = {
    "geobiked_mean_mse_over_sparsity": 0.0895,
    "geobiked_size10_by_training_sparsity": {"0.0": 0.3212, "0.2": 0.2810, "0.4": 0.2395, "0.6": 0.2106, "0.8": 0.1798},
    "geobiked_size2000_by_training_sparsity": {"0.0": 0.0767, "0.2": 0.0820, "0.4": 0.0892, "0.6": 0.0985, "0.8": 0.1035},
    "geobiked_constant_0.5_inference_0.0": 0.0766,
}

HEADER = ("sweep_var", "level", "mse_mean", "mse_std", "seeds")


@dataclass
class SweepResult:
    """Aggregated rows ``(sweep_var, level, mse_mean, mse_std, seeds)``.

    ``per_seed`` keeps the raw ``(sweep_var, level, seed, mse)`` values.
    """

    rows: list[tuple] = field(default_factory=list)
    per_seed: list[tuple] = field(default_factory=list)

    @classmethod
    def from_per_seed(cls, per_seed: Sequence[tuple]) -> "SweepResult":
        groups: dict[tuple, list[float]] = {}
        for var, level, _seed, mse in per_seed:
            groups.setdefault((var, float(level)), []).append(float(mse))
        rows = []
        for (var, level), vals in groups.items():
            v = np.asarray(vals)
            std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            rows.append((var, level, float(v.mean()), std, len(v)))
        rows.sort(key=_row_key)
        return cls(rows, sorted(per_seed, key=_row_key))

    def sweep_values(self) -> list:
        seen = []
        for r in self.rows:
            if r[0] not in seen:
                seen.append(r[0])
        return seen

    def series(self, var) -> tuple[np.ndarray, np.ndarray]:
        sel = [r for r in self.rows if r[0] == var]
        return np.array([r[1] for r in sel]), np.array([r[2] for r in sel])

    def mean_mse(self, var, level=None) -> float:
        levels, mse = self.series(var)
        if level is None:
            return float(mse.mean())
        return float(mse[np.isclose(levels, level)][0])

    def spearman(self) -> dict:
        """Rank correlation between level and mean MSE, per sweep value."""
        out = {}
        for var in self.sweep_values():
            levels, mse = self.series(var)
            if len(levels) < 2 or np.ptp(mse) == 0 or np.ptp(levels) == 0:
                out[var] = float("nan")
            else:
                out[var] = float(spearmanr(levels, mse).statistic)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            for var, level, m, s, n in self.rows:
                w.writerow([var, repr(float(level)), repr(float(m)), repr(float(s)), n])

    def per_seed_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("sweep_var", "level", "seed", "mse"))
            for var, level, seed, mse in self.per_seed:
                w.writerow([var, repr(float(level)), seed, repr(float(mse))])

    def summary(self) -> dict[str, Any]:
        return {
            "spearman_level_vs_mse": {str(k): v for k, v in self.spearman().items()},
            "published_reference": PUBLISHED_REFERENCE,
        }

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _row_key(r):
    # numeric sweep values sort numerically and ahead of labels; then level, then seed
    var = r[0]
    var_key = (0, float(var), "") if isinstance(var, (int, float)) else (1, 0.0, str(var))
    return var_key, float(r[1]), r[2]


def per_seed_mse(model, test_set, level: float, seed: int, mode: str = "posterior") -> float:
    """Mean per-sample MSE at one inference sparsity and seed.

    The random stream is rebuilt from ``seed`` alone, so masks at a higher level
    are supersets of masks at a lower one and repeated levels give equal results.
    """
    rng = np.random.default_rng(seed)
    cat, num = mask_arrays(test_set.cat, test_set.num, level, rng)
    if isinstance(model, McVae):
        if not isinstance(test_set, PointCloudDataset):
            raise SchemaMismatch("a VAE is evaluated on a point-cloud dataset")
        out = generate(model, (cat, num), rng, mode=mode, x_ref=test_set.keypoints)
        err = (out - test_set.keypoints) ** 2
    elif isinstance(model, McDiffusion):
        if not isinstance(test_set, ImageDataset):
            raise SchemaMismatch("a diffusion model is evaluated on an image dataset")
        out = sample(model, (cat, num), rng)
        err = (out - test_set.images) ** 2
    else:
        raise TypeError(f"cannot evaluate {type(model).__name__}")
    return float(err.reshape(len(err), -1).mean(axis=1).mean())


def eval_mse_vs_sparsity(
    model,
    test_set,
    levels: Sequence[float] = DEFAULT_LEVELS,
    seeds: Sequence[int] = (0, 1, 2),
    mode: str = "posterior",
    sweep_var="model",
) -> SweepResult:
    if test_set.schema.to_dict() != model.schema.to_dict():
        raise SchemaMismatch("test set schema differs from the model's condition schema")
    for lv in levels:
        if not 0.0 <= lv <= 1.0:
            raise ValueError(f"sparsity level {lv} outside [0, 1]")
    per_seed = [(sweep_var, float(lv), s, per_seed_mse(model, test_set, lv, s, mode)) for lv in levels for s in seeds]
    return SweepResult.from_per_seed(per_seed)


def train_fresh_vae(
    train: PointCloudDataset, config: VaeConfig, schedule: SparsitySchedule, seed: int
) -> tuple[McVae, Any]:
    """New model with init and training streams derived from ``seed``."""
    torch_gen = torch.Generator().manual_seed(seed)
    model = McVae(config, train.schema, torch_gen)
    report = train_vae(model, train, config, schedule, np.random.default_rng(seed))
    return model, report


def sweep_dataset_size(
    base_dataset: PointCloudDataset,
    sizes: Sequence[int],
    train_sparsities: Sequence[float],
    config: VaeConfig,
    seeds: Sequence[int],
    inference_levels: Sequence[float] | None = None,
    test_fraction: float = 0.2,
    split_seed: int = 0,
    mode: str = "posterior",
    progress: Callable[[str], None] | None = None,
) -> SweepResult:
    """Train one model per (size, training sparsity, seed) and evaluate it.

    Rows are ``(size, training sparsity, mse_mean, mse_std, seeds)``. Each model
    is scored at ``inference_levels`` averaged; with ``None`` it is scored at its
    own constant training sparsity. Smaller training sets are prefixes of one
    fixed shuffle of the pool, and the test split is shared by all cells.
    """
    pool, test = split(base_dataset, test_fraction, split_seed)
    for size in sizes:
        if size > len(pool):
            raise SizeTooLarge(f"size {size} exceeds the {len(pool)} samples available for training")
        if size < 1:
            raise ValueError("sizes must be positive")
    per_seed = []
    for size in sizes:
        train = pool.subset(np.arange(size))
        train = train.with_stats(*train.compute_stats())
        test_sz = test.with_stats(train.mean, train.std)
        for p in train_sparsities:
            for seed in seeds:
                model, _ = train_fresh_vae(train, config, SparsitySchedule.constant(p), seed)
                levels = [p] if inference_levels is None else inference_levels
                mse = float(np.mean([per_seed_mse(model, test_sz, lv, seed, mode) for lv in levels]))
                per_seed.append((int(size), float(p), seed, mse))
                if progress:
                    progress(f"size={size} p={p} seed={seed} mse={mse:.5f}")
    return SweepResult.from_per_seed(per_seed)


DEFAULT_SCHEDULES = {
    "constant": {"kind": "constant", "p_start": 0.5},
    "linear": {"kind": "linear", "p_start": 0.5, "p_end": 0.6},
    "step": {"kind": "step", "p_start": 0.5, "p_end": 0.6, "segments": 5},
    "exponential": {"kind": "exponential", "p_start": 0.5, "p_end": 0.6},
}


def compare_schedules(
    dataset: PointCloudDataset,
    schedule_specs: dict[str, dict] | None,
    config: VaeConfig,
    inference_levels: Sequence[float] = DEFAULT_LEVELS,
    seeds: Sequence[int] = (0, 1, 2),
    test_fraction: float = 0.2,
    split_seed: int = 0,
    mode: str = "posterior",
    progress: Callable[[str], None] | None = None,
) -> SweepResult:
    """Train one model per (schedule, seed); rows are ``(schedule, inference level, ...)``."""
    specs = DEFAULT_SCHEDULES if schedule_specs is None else schedule_specs
    train, test = split(dataset, test_fraction, split_seed)
    per_seed = []
    for name in specs:
        sched = SparsitySchedule.from_config(specs[name], total_steps=1)
        for seed in seeds:
            model, _ = train_fresh_vae(train, config, sched, seed)
            for lv in inference_levels:
                per_seed.append((name, float(lv), seed, per_seed_mse(model, test, lv, seed, mode)))
            if progress:
                progress(f"schedule={name} seed={seed} done")
    return SweepResult.from_per_seed(per_seed)


def schedule_table(result: SweepResult) -> dict[str, dict[str, float]]:
    """Two rows per schedule: inference sparsity 0.0 and the mean over all levels."""
    table = {}
    for var in result.sweep_values():
        levels, mse = result.series(var)
        zero = mse[np.isclose(levels, 0.0)]
        table[var] = {
            "0.0": float(zero[0]) if len(zero) else float("nan"),
            f"{levels.min():g}-{levels.max():g}": float(mse.mean()),
        }
    return table
