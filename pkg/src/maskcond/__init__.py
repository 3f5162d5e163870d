"""Masked conditioning for deep generative models.

Mixed categorical/numerical condition embeddings with a reserved masked state,
sparsity schedules for training-time condition masking, a masked-conditioning
VAE for keypoint point clouds and a small masked-conditioning diffusion model.
"""

from .conditions import (
    MASKED,
    CategoricalFeature,
    ConditionEmbedder,
    ConditionSchema,
    ConditionVector,
    NumericalFeature,
    mask_arrays,
    mask_conditions,
    validate_schema,
)
from .schedules import ScheduleKind, SparsitySchedule, sparsity_at

__version__ = "0.1.0"

__all__ = [
    "MASKED",
    "CategoricalFeature",
    "NumericalFeature",
    "ConditionSchema",
    "ConditionVector",
    "ConditionEmbedder",
    "mask_conditions",
    "mask_arrays",
    "validate_schema",
    "ScheduleKind",
    "SparsitySchedule",
    "sparsity_at",
]
