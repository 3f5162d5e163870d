"""Condition schemas, random masking and the condition embedding.

Builds a small mixed schema, masks a batch of condition vectors at a few
rates and shows that a masked feature maps to its reserved embedding row.
"""

import numpy as np
import torch

from maskcond import (
    MASKED,
    CategoricalFeature,
    ConditionEmbedder,
    ConditionSchema,
    ConditionVector,
    NumericalFeature,
    mask_conditions,
)

schema = ConditionSchema(
    categorical_features=(
        CategoricalFeature("frame", ("road", "mtb", "city")),
        CategoricalFeature("fork", ("rigid", "suspension")),
    ),
    numerical_features=(NumericalFeature("wheel_size", 20.0, 29.0),),
    d_cat=4,
    d_num=4,
)
print("d_y =", schema.d_y)

v, _ = schema.numerical_features[0].normalize(27.5)
cv = ConditionVector((1, 0), (v,))
rng = np.random.default_rng(0)
for p in (0.0, 0.3, 0.7, 1.0):
    print(f"p={p}:", mask_conditions(cv, p, rng))

emb = ConditionEmbedder(schema, torch.Generator().manual_seed(0))
masked = ConditionVector((MASKED, 0), (v,))
e_full, e_masked = emb.embed(cv), emb.embed(masked)
# only the first categorical slice moves, and it lands on the mask row
print("changed slots:", torch.nonzero(e_full != e_masked).flatten().tolist())
print("mask row used:", torch.equal(e_masked[:4], emb.cat_tables[0][-1]))
