"""Empirical probe for the training-based acceptance criteria fixture."""

import json
import sys
import time
from fractions import Fraction

import numpy as np

from dosediff.anchors import AnchorSet, calibrate
from dosediff.denoiser import DenoiserConfig, model_from_checkpoint
from dosediff.metrics import metric_report, nmae, psnr, wilcoxon_holm
from dosediff.phantom import PhantomSpec, generate_cohort
from dosediff.sampler import sample_volume
from dosediff.schedule import WeightSchedule, linear_schedule
from dosediff.trainer import TrainConfig, full_dose_norm_scale, train
from dosediff.volio import FULL_DOSE, ULTRA_LOW_DOSE, make_patch_grid

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 2500
LR = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-4
SEED = int(sys.argv[3]) if len(sys.argv) > 3 else 0
COUNT_SCALE = float(sys.argv[4]) if len(sys.argv) > 4 else 5.0
STRIDE = int(sys.argv[5]) if len(sys.argv) > 5 else 10
LAM = float(sys.argv[6]) if len(sys.argv) > 6 else 1.0

t0 = time.time()
spec = PhantomSpec(dims=(16, 16, 16), seed=SEED, count_scale=COUNT_SCALE)
train_subjects = generate_cohort(spec, 10, prefix="train")
test_spec = PhantomSpec(dims=(16, 16, 16), seed=SEED + 7777, count_scale=COUNT_SCALE)
test_subjects = generate_cohort(test_spec, 5, prefix="test")
sched = linear_schedule(1000)
anchor_set = AnchorSet()
norm_scale = full_dose_norm_scale(train_subjects)
result = calibrate(train_subjects, anchor_set, sched, sweep_stride=STRIDE, seed=SEED + 1,
                   norm_scale=norm_scale)
print(f"[{time.time()-t0:.0f}s] taus={result.boundaries.taus} scale={norm_scale:.2f}")

den_cfg = DenoiserConfig(num_timesteps=1000)
base_cfg = TrainConfig(
    steps=STEPS, batch_size=8, learning_rate=LR, lam=LAM,
    weight_schedule=WeightSchedule(kind="poly", p=2.0),
    anchor_set=anchor_set, boundaries=result.boundaries,
    patch_size=8, stride=4, norm_scale=norm_scale, seed=SEED + 2,
)

models = {}
from dataclasses import replace
variants = {
    "anchored": base_cfg,
    "baseline": replace(base_cfg, anchor_enabled=False, lam=0.0, boundaries=None),
    "const": replace(base_cfg, weight_schedule=WeightSchedule(kind="const", c=1.0)),
}
for name, cfg in variants.items():
    ckpt, log = train(train_subjects, cfg, den_cfg, sched)
    models[name] = ckpt
    early = np.mean([r["loss_noise"] for r in log[:100]])
    late = np.mean([r["loss_noise"] for r in log[-100:]])
    la = np.mean([r["loss_anch"] for r in log[-100:]])
    print(f"[{time.time()-t0:.0f}s] {name}: loss_noise {early:.3f} -> {late:.3f}, anch {la:.3f}")

finals = {}
inters = {}
for name, ckpt in models.items():
    model = model_from_checkpoint(ckpt)
    finals[name] = {}
    inters[name] = {}
    for s in test_subjects:
        y = s.volumes[ULTRA_LOW_DOSE]
        grid = make_patch_grid(y.dims, 8, 8)
        seed = hash((SEED, s.subject_id)) % (2**31)
        out = sample_volume(model, y, grid, sched, result.boundaries, seed, norm_scale)
        finals[name][s.subject_id] = out.final
        inters[name][s.subject_id] = out.intermediates
    print(f"[{time.time()-t0:.0f}s] sampled {name}")

doses = sorted(anchor_set.partial_doses)
summary = {}
for name in models:
    reports = [
        metric_report(finals[name][s.subject_id], s.volumes[FULL_DOSE], s.mask)
        for s in test_subjects
    ]
    summary[name] = {
        "psnr": float(np.mean([r.psnr for r in reports])),
        "ssim": float(np.mean([r.ssim for r in reports])),
        "nmae": float(np.mean([r.nmae for r in reports])),
    }
input_reports = [
    metric_report(s.volumes[ULTRA_LOW_DOSE], s.volumes[FULL_DOSE], s.mask)
    for s in test_subjects
]
summary["input"] = {
    "psnr": float(np.mean([r.psnr for r in input_reports])),
    "ssim": float(np.mean([r.ssim for r in input_reports])),
    "nmae": float(np.mean([r.nmae for r in input_reports])),
}
print(json.dumps(summary, indent=2))

# criterion 7: intermediate accuracy vs paired real doses
for dose, tau in zip(doses, result.boundaries.taus):
    vals = {}
    for name in ("anchored", "baseline"):
        vals[name] = float(np.mean([
            nmae(inters[name][s.subject_id][tau], s.volumes[dose], s.mask)
            for s in test_subjects
        ]))
    flag = "OK " if vals["anchored"] <= vals["baseline"] else "BAD"
    print(f"{flag} inter@{dose} tau={tau}: anchored {vals['anchored']:.4f} vs baseline {vals['baseline']:.4f}")

# criterion checks
c6a = summary["anchored"]["psnr"] >= summary["baseline"]["psnr"]
c6b = summary["anchored"]["nmae"] <= summary["baseline"]["nmae"]
c6c = summary["anchored"]["psnr"] >= summary["input"]["psnr"] + 1.0
c6d = summary["baseline"]["psnr"] >= summary["input"]["psnr"] + 1.0
worse = sum(
    1 for m, sign in (("psnr", 1), ("ssim", 1), ("nmae", -1))
    if sign * summary["const"][m] < sign * summary["anchored"][m]
)
print(f"criterion6: psnr>=base {c6a}, nmae<=base {c6b}, anchored>input+1dB {c6c}, base>input+1dB {c6d}")
print(f"criterion8: const worse than anchored on {worse}/3 metrics (need >=2)")

psnr_scores = {
    name: [
        psnr(finals[name][s.subject_id], s.volumes[FULL_DOSE], s.mask)
        for s in test_subjects
    ]
    for name in models
}
psnr_scores["input"] = [r.psnr for r in input_reports]
print("wilcoxon-holm p (psnr vs anchored):",
      wilcoxon_holm(psnr_scores, reference_method="anchored"))
print(f"total {time.time()-t0:.0f}s")
