"""Mixed categorical/numerical conditions: schema, masking and the trainable embedding.

Conditions travel through the package in two forms. A :class:`ConditionVector`
is a single immutable record whose entries are either observed values or the
:data:`MASKED` sentinel. For batched work the same information is held in a pair
of arrays ``(cat, num)``: ``cat`` is an ``int64`` array of category codes with
``-1`` marking a masked entry and ``num`` is a float array of normalized values
in ``[0, 1]`` with ``NaN`` marking a masked entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .errors import (
    DuplicateCategory,
    EmptyFeatureSet,
    IndexOutOfRange,
    InvalidProbability,
    InvalidRange,
    NonFiniteValue,
    SchemaError,
    SchemaMismatch,
)

__all__ = [
    "MASKED",
    "CategoricalFeature",
    "NumericalFeature",
    "ConditionSchema",
    "ConditionVector",
    "ConditionEmbedder",
    "validate_schema",
    "mask_conditions",
    "mask_arrays",
    "to_arrays",
    "from_arrays",
    "NUMERICAL_SENTINEL",
]

# Value fed to a numerical projection in place of a masked entry. Observed values
# are normalized to [0, 1], so the sentinel never collides with real data.
NUMERICAL_SENTINEL = -1.0


class _Masked:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "MASKED"

    def __reduce__(self):
        return (_Masked, ())


MASKED = _Masked()


@dataclass(frozen=True)
class CategoricalFeature:
    name: str
    categories: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(str(c) for c in self.categories))

    @property
    def cardinality(self) -> int:
        return len(self.categories)

    def code(self, label: str) -> int:
        """Category code of ``label``; raises ``KeyError`` for unknown labels."""
        try:
            return self.categories.index(label)
        except ValueError:
            raise KeyError(label) from None


@dataclass(frozen=True)
class NumericalFeature:
    name: str
    min: float
    max: float

    def normalize(self, raw: float) -> tuple[float, bool]:
        """Min-max normalize ``raw`` into ``[0, 1]``.

        Returns the normalized value and whether it had to be clamped.
        """
        v = (float(raw) - self.min) / (self.max - self.min)
        if v < 0.0:
            return 0.0, True
        if v > 1.0:
            return 1.0, True
        return v, False

    def denormalize(self, value: float) -> float:
        return self.min + float(value) * (self.max - self.min)


@dataclass(frozen=True)
class ConditionSchema:
    categorical_features: tuple[CategoricalFeature, ...] = ()
    numerical_features: tuple[NumericalFeature, ...] = ()
    d_cat: int = 11
    d_num: int = 11
    # feature name -> dataset column name, for files whose headers differ
    columns: dict[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "categorical_features", tuple(self.categorical_features))
        object.__setattr__(self, "numerical_features", tuple(self.numerical_features))

    @property
    def k_cat(self) -> int:
        return len(self.categorical_features)

    @property
    def k_num(self) -> int:
        return len(self.numerical_features)

    @property
    def num_entries(self) -> int:
        return self.k_cat + self.k_num

    @property
    def d_y(self) -> int:
        return self.k_cat * self.d_cat + self.k_num * self.d_num

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(f.cardinality for f in self.categorical_features)

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.categorical_features] + [f.name for f in self.numerical_features]

    def column_for(self, name: str) -> str:
        return self.columns.get(name, name)

    def feature_slices(self) -> dict[str, slice]:
        """Slice of the flat embedding occupied by each feature."""
        out = {}
        pos = 0
        for f in self.categorical_features:
            out[f.name] = slice(pos, pos + self.d_cat)
            pos += self.d_cat
        for f in self.numerical_features:
            out[f.name] = slice(pos, pos + self.d_num)
            pos += self.d_num
        return out

    def to_dict(self) -> dict[str, Any]:
        d = {
            "categorical_features": [
                {"name": f.name, "cardinality": f.cardinality, "categories": list(f.categories)}
                for f in self.categorical_features
            ],
            "numerical_features": [
                {"name": f.name, "min": f.min, "max": f.max} for f in self.numerical_features
            ],
            "d_cat": self.d_cat,
            "d_num": self.d_num,
        }
        if self.columns:
            d["columns"] = dict(self.columns)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ConditionSchema":
        cats = []
        for f in d.get("categorical_features", []):
            cats.append(CategoricalFeature(f["name"], tuple(f["categories"])))
            if "cardinality" in f and int(f["cardinality"]) != len(f["categories"]):
                raise SchemaError(
                    f"feature {f['name']!r}: cardinality {f['cardinality']} "
                    f"does not match {len(f['categories'])} listed categories"
                )
        nums = [
            NumericalFeature(f["name"], float(f["min"]), float(f["max"]))
            for f in d.get("numerical_features", [])
        ]
        schema = cls(
            tuple(cats),
            tuple(nums),
            d_cat=int(d.get("d_cat", 11)),
            d_num=int(d.get("d_num", 11)),
            columns=dict(d.get("columns", {})),
        )
        validate_schema(schema)
        return schema

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ConditionSchema":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ConditionSchema":
        return cls.from_json(Path(path).read_text())


def validate_schema(schema: ConditionSchema) -> None:
    """Raise a :class:`SchemaError` subclass naming the offending feature, if any."""
    if schema.k_cat + schema.k_num < 1:
        raise EmptyFeatureSet("schema declares no categorical and no numerical features")
    if schema.d_cat < 1 or schema.d_num < 1:
        raise SchemaError(f"embedding dimensions must be positive (d_cat={schema.d_cat}, d_num={schema.d_num})")
    names = schema.feature_names
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise SchemaError(f"feature name {dup!r} declared twice")
    for f in schema.categorical_features:
        if f.cardinality < 1:
            raise SchemaError(f"categorical feature {f.name!r} has no categories")
        if len(set(f.categories)) != f.cardinality:
            dup = next(c for c in f.categories if f.categories.count(c) > 1)
            raise DuplicateCategory(f"categorical feature {f.name!r} lists category {dup!r} twice")
    for f in schema.numerical_features:
        if not (math.isfinite(f.min) and math.isfinite(f.max)) or not f.min < f.max:
            raise InvalidRange(f"numerical feature {f.name!r} needs min < max, got [{f.min}, {f.max}]")


@dataclass(frozen=True)
class ConditionVector:
    """One condition record. Entries are codes/normalized values or ``MASKED``."""

    categorical: tuple = ()
    numerical: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "categorical", tuple(self.categorical))
        object.__setattr__(self, "numerical", tuple(self.numerical))

    @classmethod
    def all_masked(cls, schema: ConditionSchema) -> "ConditionVector":
        return cls((MASKED,) * schema.k_cat, (MASKED,) * schema.k_num)

    @property
    def entries(self) -> tuple:
        return self.categorical + self.numerical

    @property
    def num_masked(self) -> int:
        return sum(e is MASKED for e in self.entries)

    def check(self, schema: ConditionSchema) -> None:
        if len(self.categorical) != schema.k_cat or len(self.numerical) != schema.k_num:
            raise SchemaMismatch(
                f"condition vector has {len(self.categorical)} categorical / {len(self.numerical)} "
                f"numerical entries, schema expects {schema.k_cat} / {schema.k_num}"
            )
        for f, e in zip(schema.categorical_features, self.categorical):
            if e is not MASKED and not 0 <= int(e) < f.cardinality:
                raise IndexOutOfRange(f"feature {f.name!r}: category index {e} outside [0, {f.cardinality})")
        for f, e in zip(schema.numerical_features, self.numerical):
            if e is MASKED:
                continue
            if not math.isfinite(e):
                raise NonFiniteValue(f"feature {f.name!r}: value {e} is not finite")
            if not 0.0 <= e <= 1.0:
                raise SchemaMismatch(f"feature {f.name!r}: normalized value {e} outside [0, 1]")


def _check_probability(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise InvalidProbability(f"masking probability must lie in [0, 1], got {p}")


def mask_conditions(cv: ConditionVector, p: float, rng: np.random.Generator) -> ConditionVector:
    """Independently replace every entry by ``MASKED`` with probability ``p``."""
    _check_probability(p)
    n_cat = len(cv.categorical)
    drop = rng.random(n_cat + len(cv.numerical)) < p
    cat = tuple(MASKED if d else e for e, d in zip(cv.categorical, drop[:n_cat]))
    num = tuple(MASKED if d else e for e, d in zip(cv.numerical, drop[n_cat:]))
    return ConditionVector(cat, num)


def mask_arrays(
    cat: np.ndarray, num: np.ndarray, p: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`mask_conditions` on the ``(cat, num)`` array form.

    Row ``r`` consumes the same random draws that ``mask_conditions`` would use
    for the ``r``-th vector, so both paths agree for a shared stream.
    """
    _check_probability(p)
    n, k_cat = cat.shape
    drop = rng.random((n, k_cat + num.shape[1])) < p
    cat = np.where(drop[:, :k_cat], -1, cat)
    num = np.where(drop[:, k_cat:], np.nan, num)
    return cat, num


def to_arrays(cvs: Sequence[ConditionVector], schema: ConditionSchema) -> tuple[np.ndarray, np.ndarray]:
    cat = np.full((len(cvs), schema.k_cat), -1, dtype=np.int64)
    num = np.full((len(cvs), schema.k_num), np.nan, dtype=np.float64)
    for r, cv in enumerate(cvs):
        cv.check(schema)
        for i, e in enumerate(cv.categorical):
            if e is not MASKED:
                cat[r, i] = int(e)
        for j, e in enumerate(cv.numerical):
            if e is not MASKED:
                num[r, j] = float(e)
    return cat, num


def from_arrays(cat: np.ndarray, num: np.ndarray) -> list[ConditionVector]:
    out = []
    for crow, nrow in zip(np.asarray(cat), np.asarray(num)):
        out.append(
            ConditionVector(
                tuple(MASKED if c < 0 else int(c) for c in crow),
                tuple(MASKED if np.isnan(v) else float(v) for v in nrow),
            )
        )
    return out


class ConditionEmbedder(nn.Module):
    """Learnable map from (possibly masked) conditions to the flat vector ``e_y``.

    Categorical feature ``i`` owns a table of ``n_i + 1`` rows; the last row is the
    mask token. Numerical feature ``j`` owns an affine map ``v -> v * w_j + b_j``
    and a masked entry is fed through it as ``v = -1``.
    """

    def __init__(self, schema: ConditionSchema, generator: torch.Generator | None = None):
        super().__init__()
        validate_schema(schema)
        self.schema = schema
        self.cat_tables = nn.ParameterList(
            [nn.Parameter(torch.empty(n + 1, schema.d_cat)) for n in schema.cardinalities]
        )
        self.num_weight = nn.Parameter(torch.empty(schema.k_num, schema.d_num))
        self.num_bias = nn.Parameter(torch.empty(schema.k_num, schema.d_num))
        self.reset_parameters(generator)
        # mask row index per categorical feature, used to remap the -1 code
        self.register_buffer(
            "_mask_rows", torch.tensor(schema.cardinalities, dtype=torch.long), persistent=False
        )

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for table in self.cat_tables:
            bound = 1.0 / math.sqrt(self.schema.d_cat)
            table.uniform_(-bound, bound, generator=generator)
        bound = 1.0 / math.sqrt(self.schema.d_num)
        self.num_weight.uniform_(-bound, bound, generator=generator)
        self.num_bias.uniform_(-bound, bound, generator=generator)

    @property
    def d_y(self) -> int:
        return self.schema.d_y

    def embed_categorical(self, i: int, entry) -> Tensor:
        if not 0 <= i < self.schema.k_cat:
            raise IndexOutOfRange(f"categorical feature index {i} outside [0, {self.schema.k_cat})")
        n = self.schema.cardinalities[i]
        if entry is MASKED:
            row = n
        else:
            row = int(entry)
            if not 0 <= row < n:
                raise IndexOutOfRange(f"category {row} outside [0, {n}) for feature {i}")
        return self.cat_tables[i][row]

    def embed_numerical(self, j: int, entry) -> Tensor:
        if not 0 <= j < self.schema.k_num:
            raise IndexOutOfRange(f"numerical feature index {j} outside [0, {self.schema.k_num})")
        if entry is MASKED:
            v = NUMERICAL_SENTINEL
        else:
            v = float(entry)
            if not math.isfinite(v):
                raise NonFiniteValue(f"numerical feature {j}: value {v} is not finite")
        return v * self.num_weight[j] + self.num_bias[j]

    def embed(self, cv: ConditionVector) -> Tensor:
        """Flat embedding ``e_y`` of a single condition vector."""
        if len(cv.categorical) != self.schema.k_cat or len(cv.numerical) != self.schema.k_num:
            raise SchemaMismatch(
                f"expected {self.schema.k_cat} categorical / {self.schema.k_num} numerical entries"
            )
        parts = [self.embed_categorical(i, e) for i, e in enumerate(cv.categorical)]
        parts += [self.embed_numerical(j, e) for j, e in enumerate(cv.numerical)]
        return torch.cat(parts)

    def forward(self, cat, num) -> Tensor:
        """Batched embedding of the ``(cat, num)`` array form, shape ``(B, d_y)``."""
        dtype = self.num_weight.dtype
        cat = torch.as_tensor(cat, dtype=torch.long, device=self.num_weight.device)
        num = torch.as_tensor(num, dtype=dtype, device=self.num_weight.device)
        if cat.ndim != 2 or cat.shape[1] != self.schema.k_cat or num.ndim != 2 or num.shape[1] != self.schema.k_num:
            raise SchemaMismatch(
                f"condition arrays of shape {tuple(cat.shape)} / {tuple(num.shape)} do not match schema "
                f"({self.schema.k_cat} categorical, {self.schema.k_num} numerical)"
            )
        if cat.shape[0] != num.shape[0]:
            raise SchemaMismatch("categorical and numerical arrays disagree on batch size")
        batch = cat.shape[0]
        parts = []
        if self.schema.k_cat:
            if bool((cat >= self._mask_rows).any()):
                raise IndexOutOfRange("category code exceeds feature cardinality")
            rows = torch.where(cat < 0, self._mask_rows.expand_as(cat), cat)
            for i, table in enumerate(self.cat_tables):
                parts.append(table[rows[:, i]])
        if self.schema.k_num:
            if bool(torch.isinf(num).any()):
                raise NonFiniteValue("numerical condition is infinite")
            v = torch.where(torch.isnan(num), torch.full_like(num, NUMERICAL_SENTINEL), num)
            e = v.unsqueeze(-1) * self.num_weight + self.num_bias
            parts.append(e.reshape(batch, -1))
        return torch.cat(parts, dim=1)

    def embed_many(self, cvs: Iterable[ConditionVector]) -> Tensor:
        return self(*to_arrays(list(cvs), self.schema))
