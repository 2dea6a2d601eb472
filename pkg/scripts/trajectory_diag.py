"""Diagnose where the reverse trajectory degrades for a trained model."""

import sys
import time
from dataclasses import replace

import numpy as np
import torch

from dosediff.anchors import AnchorSet, calibrate
from dosediff.denoiser import DenoiserConfig, model_from_checkpoint
from dosediff.phantom import PhantomSpec, generate_cohort
from dosediff.schedule import WeightSchedule, linear_schedule, predict_x0, reverse_step
from dosediff.trainer import PatchSampler, TrainConfig, full_dose_norm_scale, train
from dosediff.volio import FULL_DOSE, ULTRA_LOW_DOSE

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
LR = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-4

t0 = time.time()
train_subjects = generate_cohort(PhantomSpec(dims=(16, 16, 16), seed=0), 6, prefix="train")
sched = linear_schedule(1000)
norm_scale = full_dose_norm_scale(train_subjects)
result = calibrate(train_subjects, AnchorSet(), sched, sweep_stride=10, seed=1,
                   norm_scale=norm_scale)
cfg = TrainConfig(
    steps=STEPS, batch_size=8, learning_rate=LR, lam=1.0,
    weight_schedule=WeightSchedule(kind="poly", p=2.0),
    anchor_set=AnchorSet(), boundaries=result.boundaries,
    patch_size=8, stride=4, norm_scale=norm_scale, seed=2,
)
den_cfg = DenoiserConfig(num_timesteps=1000)
ckpt, log = train(train_subjects, cfg, den_cfg, sched)
print(f"[{time.time()-t0:.0f}s] trained: loss {np.mean([r['loss_noise'] for r in log[:100]]):.3f} "
      f"-> {np.mean([r['loss_noise'] for r in log[-100:]]):.3f}")
model = model_from_checkpoint(ckpt)
model.eval()

# per-timestep validation: E||eps - eps_hat||^2 and ||x0_hat - x0|| on held-out subject
val = generate_cohort(PhantomSpec(dims=(16, 16, 16), seed=999), 1, prefix="val")[0]
sampler = PatchSampler([val], cfg)
batch = sampler.draw(torch.Generator().manual_seed(3))
g = torch.Generator().manual_seed(4)
eps = torch.randn(batch.x0.shape, generator=g)
print("per-t validation (eps MSE, x0_hat MAE vs x0):")
with torch.no_grad():
    for t in (1000, 900, 700, 500, 300, 200, 100, 50, 10, 1):
        ab = sched.alpha_bar_at(t)
        x_t = np.sqrt(ab) * batch.x0 + np.sqrt(1 - ab) * eps
        pred = model(x_t, t, batch.y)
        mse = float(torch.mean((eps - pred) ** 2))
        x0h = predict_x0(x_t, t, pred, sched)
        mae = float(torch.mean(torch.abs(x0h - batch.x0)))
        print(f"  t={t:4d}: eps mse {mse:.4f}  x0_hat mae {mae:.3f}")

# reverse trajectory stats on one patch
y_patch = batch.y[:1]
gen = torch.Generator().manual_seed(5)
x = torch.randn(y_patch.shape, generator=gen)
with torch.no_grad():
    for t in range(1000, 0, -1):
        pred = model(x, t, y_patch)
        z = torch.randn(x.shape, generator=gen) if t > 1 else None
        x = reverse_step(x, t, pred, z, sched)
        if t % 100 == 0 or t in (50, 20, 5, 1):
            print(f"  t={t:4d}: max|x| {float(x.abs().max()):8.2f} mean|x| {float(x.abs().mean()):8.3f}")
print(f"x0 patch mean|.| = {float(batch.x0[:1].abs().mean()):.3f}")
print(f"total {time.time()-t0:.0f}s")
