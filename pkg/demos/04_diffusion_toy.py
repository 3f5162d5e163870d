"""A tiny pixel-space diffusion model on rendered polygons.

Trains briefly on 16x16 renders, then samples the same conditions with and
without masking. Short enough to run in a couple of minutes; samples will be
rough at this budget.
"""

import numpy as np
import torch

from maskcond.conditions import ConditionVector, MASKED
from maskcond.data import SynthSpec, synth_image_dataset
from maskcond.mcdm import DiffusionConfig, McDiffusion, sample, train_dm
from maskcond.schedules import SparsitySchedule

torch.set_num_threads(1)

ds = synth_image_dataset(SynthSpec(), 32, seed=0, image_shape=(1, 16, 16))
cfg = DiffusionConfig(image_shape=(1, 16, 16), unet_levels=2, base_channels=16, T_steps=200, learning_rate=1e-3, train_steps=800)
model = McDiffusion(cfg, ds.schema, torch.Generator().manual_seed(0))
report = train_dm(model, ds, cfg, SparsitySchedule.linear(0.1, 0.25), np.random.default_rng(0))
loss = report.column("loss")
print(f"loss: first 50 steps {loss[:50].mean():.3f}, last 50 steps {loss[-50:].mean():.3f}")
print(f"p_t went from {report.p_trace[0]:.3f} to {report.p_trace[-1]:.3f}")

full = ds.conditions[0]
partial = ConditionVector((full.categorical[0], MASKED), (MASKED,))
imgs = sample(model, [full, partial], np.random.default_rng(1))
for name, img in zip(("full", "style only"), imgs):
    print(f"\n{name}: MSE to reference {np.mean((img - ds.images[0]) ** 2):.4f}")
    for row in img[0]:
        print("".join("#" if v < 0.5 else "." for v in row))
