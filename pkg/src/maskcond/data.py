"""Datasets: point-cloud CSV ingestion, image folders, splits, and the synthetic oracle.

Keypoint rows are flat vectors ``[x0, y0, x1, y1, ...]`` of length ``2K``.
Conditions are held in the ``(cat, num)`` array form described in
:mod:`maskcond.conditions`.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditions import (
    CategoricalFeature,
    ConditionSchema,
    ConditionVector,
    NumericalFeature,
    from_arrays,
    validate_schema,
)
from .errors import (
    EmptySplit,
    IndexOutOfRange,
    MalformedNumber,
    MissingColumn,
    ShapeMismatch,
    UnknownCategoryLabel,
)

__all__ = [
    "PointCloudDataset",
    "ImageDataset",
    "SynthSpec",
    "load_pointcloud_csv",
    "write_pointcloud_csv",
    "load_image_dataset",
    "write_image_dataset",
    "split",
    "synth_schema",
    "synth_generate",
    "synth_image_dataset",
    "oracle_mean",
    "render_image",
    "keypoint_columns",
]


def keypoint_columns(K: int) -> list[str]:
    cols = []
    for i in range(K):
        cols += [f"kp{i}_x", f"kp{i}_y"]
    return cols


@dataclass
class PointCloudDataset:
    keypoints: np.ndarray
    cat: np.ndarray
    num: np.ndarray
    schema: ConditionSchema
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    clamped: int = 0

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.cat = np.asarray(self.cat, dtype=np.int64).reshape(len(self.keypoints), self.schema.k_cat)
        self.num = np.asarray(self.num, dtype=np.float64).reshape(len(self.keypoints), self.schema.k_num)
        if self.keypoints.ndim != 2 or self.keypoints.shape[1] % 2:
            raise ShapeMismatch(f"keypoints must be N x 2K, got {self.keypoints.shape}")

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[1] // 2

    @property
    def conditions(self) -> list[ConditionVector]:
        return from_arrays(self.cat, self.num)

    def subset(self, idx) -> "PointCloudDataset":
        idx = np.asarray(idx)
        return replace(self, keypoints=self.keypoints[idx], cat=self.cat[idx], num=self.num[idx])

    def with_stats(self, mean: np.ndarray, std: np.ndarray) -> "PointCloudDataset":
        return replace(self, mean=np.asarray(mean, dtype=np.float64), std=np.asarray(std, dtype=np.float64))

    def compute_stats(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.keypoints.mean(axis=0)
        std = self.keypoints.std(axis=0)
        # a constant coordinate would otherwise divide by zero
        std = np.where(std > 0, std, 1.0)
        return mean, std

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def destandardize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def load_pointcloud_csv(path, schema: ConditionSchema | str | Path) -> PointCloudDataset:
    """Read ``kp{i}_x, kp{i}_y`` columns plus one column per condition.

    Empty condition cells become masked entries. Numerical values outside the
    schema range are clamped and counted in ``dataset.clamped``.
    """
    if not isinstance(schema, ConditionSchema):
        schema = ConditionSchema.load(schema)
    validate_schema(schema)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        K = 0
        while f"kp{K}_x" in header:
            K += 1
        if K == 0:
            raise MissingColumn("no keypoint columns (kp0_x, kp0_y, ...) found")
        kp_cols = keypoint_columns(K)
        cond_cols = [schema.column_for(n) for n in schema.feature_names]
        for col in kp_cols + cond_cols:
            if col not in header:
                raise MissingColumn(f"column {col!r} missing from {path}")
        rows = list(reader)

    n = len(rows)
    keypoints = np.empty((n, 2 * K))
    for r, row in enumerate(rows):
        for c, col in enumerate(kp_cols):
            try:
                keypoints[r, c] = float(row[col])
            except (TypeError, ValueError):
                raise MalformedNumber(f"row {r}, column {col!r}: cannot parse {row[col]!r}") from None
    cat, num, clamped = _conditions_from_rows(rows, schema)
    if clamped:
        warnings.warn(f"{clamped} numerical value(s) outside the schema range were clamped", stacklevel=2)
    return PointCloudDataset(keypoints, cat, num, schema, clamped=clamped)


def write_pointcloud_csv(ds: PointCloudDataset, path) -> None:
    schema = ds.schema
    header = keypoint_columns(ds.num_keypoints) + [schema.column_for(n) for n in schema.feature_names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for kp, crow, nrow in zip(ds.keypoints, ds.cat, ds.num):
            cells = [repr(float(v)) for v in kp]
            cells += ["" if c < 0 else f.categories[c] for f, c in zip(schema.categorical_features, crow)]
            cells += ["" if np.isnan(v) else repr(f.denormalize(v)) for f, v in zip(schema.numerical_features, nrow)]
            w.writerow(cells)


def split(ds, test_fraction: float, seed: int):
    """Deterministic shuffled train/test split.

    Point-cloud splits carry standardization statistics computed on the train part.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(ds)
    n_test = int(round(n * test_fraction))
    if n_test == 0 or n_test == n:
        raise EmptySplit(f"fraction {test_fraction} of {n} samples leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    train, test = ds.subset(perm[n_test:]), ds.subset(perm[:n_test])
    if isinstance(ds, PointCloudDataset):
        mean, std = train.compute_stats()
        train, test = train.with_stats(mean, std), test.with_stats(mean, std)
    return train, test


# ---------------------------------------------------------------------------
# synthetic oracle


@dataclass(frozen=True)
class SynthSpec:
    num_styles: int = 4
    num_variants: int = 3
    noise_std: float = 0.01
    num_keypoints: int = 6
    d_cat: int = 8
    d_num: int = 8

    def __post_init__(self):
        if self.num_styles < 2 or self.num_variants < 2:
            raise ValueError("num_styles and num_variants must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.num_keypoints < 1:
            raise ValueError("num_keypoints must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))


def synth_schema(spec: SynthSpec) -> ConditionSchema:
    return ConditionSchema(
        (
            CategoricalFeature("style", tuple(f"style{i}" for i in range(spec.num_styles))),
            CategoricalFeature("variant", tuple(f"variant{i}" for i in range(spec.num_variants))),
        ),
        (NumericalFeature("scale", 0.0, 1.0),),
        d_cat=spec.d_cat,
        d_num=spec.d_num,
    )


def oracle_mean(s: int, v: int, u: float, spec: SynthSpec) -> np.ndarray:
    """Noise-free keypoints for style ``s``, variant ``v`` and scale ``u``.

    Vertices of the unit regular K-gon, rotated by ``2*pi*s/S``, scaled by
    ``0.5 + u`` and shifted by ``(v/V, -v/V)``.
    """
    if not 0 <= v < spec.num_variants:
        raise IndexOutOfRange(f"variant {v} outside [0, {spec.num_variants})")
    if not 0.0 <= u <= 1.0:
        raise IndexOutOfRange(f"scale {u} outside [0, 1]")
    K = spec.num_keypoints
    angles = 2 * np.pi * np.arange(K) / K
    base = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    theta = 2 * np.pi * s / spec.num_styles
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    pts = base @ rot.T * (0.5 + u) + np.array([v / spec.num_variants, -v / spec.num_variants])
    return pts.reshape(-1)


def synth_generate(spec: SynthSpec, n: int, seed: int) -> PointCloudDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    s = rng.integers(spec.num_styles, size=n)
    v = rng.integers(spec.num_variants, size=n)
    u = rng.random(n)
    noise = rng.normal(0.0, 1.0, size=(n, 2 * spec.num_keypoints)) * spec.noise_std
    kp = np.stack([oracle_mean(int(a), int(b), float(c), spec) for a, b, c in zip(s, v, u)]) + noise
    cat = np.stack([s, v], axis=1)
    return PointCloudDataset(kp, cat, u[:, None], synth_schema(spec))


# ---------------------------------------------------------------------------
# images


def render_image(keypoints, image_shape: Sequence[int]) -> np.ndarray:
    """Rasterize a keypoint ring onto a white canvas.

    ``keypoints`` live in ``[-1, 1]`` layout space (y up). Each point becomes a
    filled disc of radius 1.5 px, consecutive points (wrapping around) are joined
    by 1-px segments. Returns ``(C, H, W)`` floats in ``[0, 1]``, ink = 0.
    """
    C, H, W = image_shape
    pts = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    px = (pts[:, 0] + 1.0) / 2.0 * (W - 1)
    py = (1.0 - pts[:, 1]) / 2.0 * (H - 1)
    ink = np.zeros((H, W), dtype=bool)
    yy, xx = np.mgrid[0:H, 0:W]
    for x, y in zip(px, py):
        ink |= (xx - x) ** 2 + (yy - y) ** 2 <= 1.5**2
    if len(pts) > 1:
        for a in range(len(pts)):
            b = (a + 1) % len(pts)
            steps = int(np.ceil(max(abs(px[b] - px[a]), abs(py[b] - py[a])))) + 1
            lx = np.rint(np.linspace(px[a], px[b], steps)).astype(int)
            ly = np.rint(np.linspace(py[a], py[b], steps)).astype(int)
            ok = (lx >= 0) & (lx < W) & (ly >= 0) & (ly < H)
            ink[ly[ok], lx[ok]] = True
    img = np.where(ink, 0.0, 1.0)
    return np.repeat(img[None], C, axis=0)


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    cat: np.ndarray
    num: np.ndarray
    schema: ConditionSchema
    filenames: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ShapeMismatch(f"images must be N x C x H x W, got {self.images.shape}")
        self.cat = np.asarray(self.cat, dtype=np.int64).reshape(len(self.images), self.schema.k_cat)
        self.num = np.asarray(self.num, dtype=np.float64).reshape(len(self.images), self.schema.k_num)
        if not self.filenames:
            self.filenames = [f"img{i:05d}.png" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def conditions(self) -> list[ConditionVector]:
        return from_arrays(self.cat, self.num)

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            images=self.images[idx],
            cat=self.cat[idx],
            num=self.num[idx],
            filenames=[self.filenames[i] for i in idx],
        )


LAYOUT_SCALE = 1.0 / 2.25


def synth_image_dataset(
    spec: SynthSpec, n: int, seed: int, image_shape: Sequence[int] = (1, 32, 32)
) -> ImageDataset:
    """Render synthetic keypoint sets into an image dataset with the same conditions."""
    pcs = synth_generate(spec, n, seed)
    imgs = np.stack([render_image(kp * LAYOUT_SCALE, image_shape) for kp in pcs.keypoints])
    return ImageDataset(imgs, pcs.cat, pcs.num, pcs.schema)


def write_image_dataset(ds: ImageDataset, directory) -> None:
    from PIL import Image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ds.schema.save(d / "schema.json")
    schema = ds.schema
    with open(d / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename"] + [schema.column_for(n) for n in schema.feature_names])
        for name, img, crow, nrow in zip(ds.filenames, ds.images, ds.cat, ds.num):
            arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
            if arr.shape[0] == 1:
                pil = Image.fromarray(arr[0], mode="L")
            else:
                pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
            pil.save(d / name)
            cells = [name]
            cells += ["" if c < 0 else f.categories[c] for f, c in zip(schema.categorical_features, crow)]
            cells += ["" if np.isnan(v) else repr(f.denormalize(v)) for f, v in zip(schema.numerical_features, nrow)]
            w.writerow(cells)


def load_image_dataset(directory, schema: ConditionSchema | str | Path | None = None) -> ImageDataset:
    """Read PNGs listed in ``annotations.csv`` (filename + condition columns)."""
    from PIL import Image

    d = Path(directory)
    if schema is None:
        schema = d / "schema.json"
    if not isinstance(schema, ConditionSchema):
        schema = ConditionSchema.load(schema)
    with open(d / "annotations.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if "filename" not in (reader.fieldnames or []):
            raise MissingColumn("annotations.csv lacks a 'filename' column")
        rows = list(reader)
    cat, num, _ = _conditions_from_rows(rows, schema)
    images = []
    shape = None
    for row in rows:
        pil = Image.open(d / row["filename"])
        arr = np.asarray(pil.convert("RGB" if pil.mode not in ("L", "I", "1") else "L"), dtype=np.float64) / 255.0
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ShapeMismatch(f"{row['filename']} has shape {arr.shape}, expected {shape}")
        images.append(arr)
    return ImageDataset(np.stack(images), cat, num, schema, [r["filename"] for r in rows])


def _conditions_from_rows(rows, schema: ConditionSchema) -> tuple[np.ndarray, np.ndarray, int]:
    n = len(rows)
    cat = np.full((n, schema.k_cat), -1, dtype=np.int64)
    num = np.full((n, schema.k_num), np.nan)
    clamped = 0
    for r, row in enumerate(rows):
        for i, f in enumerate(schema.categorical_features):
            col = schema.column_for(f.name)
            if col not in row:
                raise MissingColumn(f"column {col!r} missing")
            label = (row[col] or "").strip()
            if label == "":
                continue
            try:
                cat[r, i] = f.code(label)
            except KeyError:
                raise UnknownCategoryLabel(f"row {r}, column {col!r}: unknown category {label!r}") from None
        for j, f in enumerate(schema.numerical_features):
            col = schema.column_for(f.name)
            if col not in row:
                raise MissingColumn(f"column {col!r} missing")
            cell = (row[col] or "").strip()
            if cell == "":
                continue
            try:
                raw = float(cell)
            except ValueError:
                raise MalformedNumber(f"row {r}, column {col!r}: cannot parse {cell!r}") from None
            if not math.isfinite(raw):
                raise MalformedNumber(f"row {r}, column {col!r}: non-finite value {cell!r}")
            num[r, j], was_clamped = f.normalize(raw)
            clamped += was_clamped
    return cat, num, clamped
