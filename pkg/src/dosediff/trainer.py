"""Anchored diffusion training over phantom patch batches.

The objective combines plain noise prediction with an anchor reconstruction
term on the per-timestep clean estimate:

    L = mean|eps - eps_pred|^2  +  lambda * mean_i[ w(t_i) * mse(x0_hat_i, a(t_i)_i) ]

where a(t) selects the observed intermediate-dose patch for t's zone.  With
lambda = 0 (or the anchor branch disabled outright) this is exactly the
plain conditional DDPM objective.  All volumes are normalized by a single
affine scale (full-dose 99.5th percentile of the training split -> 1.0)
shared across dose levels, so diffusion corruption and dose degradation
live on one intensity scale.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
import torch

from .anchors import AnchorSet, ZoneBoundaries, anchor_for_timestep
from .denoiser import (
    Checkpoint,
    ConditionalDenoiser,
    DenoiserConfig,
    checkpoint_from_model,
    rng_digest,
)
from .errors import ConfigError, TrainingDiverged
from .phantom import MultiDoseSubject
from .schedule import NoiseSchedule, WeightSchedule, weight
from .volio import FULL_DOSE, ULTRA_LOW_DOSE, make_patch_grid, masked_percentile

NORM_PERCENTILE = 99.5
DIVERGENCE_GUARD = 1e6


def full_dose_norm_scale(subjects: list[MultiDoseSubject], q: float = NORM_PERCENTILE) -> float:
    """Affine normalization scale: masked full-dose percentile -> 1.0."""
    scale = masked_percentile(
        [s.volumes[FULL_DOSE] for s in subjects], [s.mask for s in subjects], q
    )
    if scale <= 0:
        raise ValueError(f"normalization scale must be positive, got {scale}")
    return scale


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 8
    learning_rate: float = 1e-4
    lam: float = 1.0
    weight_schedule: WeightSchedule = WeightSchedule()
    anchor_set: AnchorSet = AnchorSet()
    boundaries: ZoneBoundaries | None = None
    anchor_enabled: bool = True
    patch_size: int = 16
    stride: int = 8
    norm_scale: float = 1.0
    seed: int = 0
    deterministic: bool = True
    divergence_guard: float = DIVERGENCE_GUARD

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.anchor_enabled and self.boundaries is None:
            raise ConfigError("anchored training requires calibrated boundaries")


@dataclass(frozen=True)
class TrainBatch:
    """Co-located patch tensors, all (B, 1, P, P, P) on the normalized scale."""

    x0: torch.Tensor
    y: torch.Tensor
    anchors: dict[Fraction, torch.Tensor]
    mask: torch.Tensor

    def __post_init__(self):
        shapes = {tuple(self.x0.shape), tuple(self.y.shape), tuple(self.mask.shape)}
        shapes |= {tuple(a.shape) for a in self.anchors.values()}
        if len(shapes) != 1:
            raise ValueError(f"batch tensors must share one shape, got {shapes}")


class PatchSampler:
    """Draws co-located training patches from a normalized cohort."""

    def __init__(self, subjects: list[MultiDoseSubject], cfg: TrainConfig):
        if not subjects:
            raise ValueError("training needs at least one subject")
        self.cfg = cfg
        scale = cfg.norm_scale
        self._tensors = []
        self._origins = []
        for s in subjects:
            vols = {
                f: torch.from_numpy(np.asarray(v.data / scale, dtype=np.float32))
                for f, v in s.volumes.items()
            }
            mask = torch.from_numpy(s.mask.flags.copy()).float()
            self._tensors.append((vols, mask))
            grid = make_patch_grid(s.ground_truth.dims, cfg.patch_size, cfg.stride)
            self._origins.append(grid.origins)

    def draw(self, generator: torch.Generator) -> TrainBatch:
        cfg = self.cfg
        p = cfg.patch_size
        anchor_doses = cfg.anchor_set.doses
        xs, ys, ms = [], [], []
        anchors: dict[Fraction, list] = {f: [] for f in anchor_doses}
        for _ in range(cfg.batch_size):
            si = int(torch.randint(len(self._tensors), (1,), generator=generator))
            oi = int(torch.randint(len(self._origins[si]), (1,), generator=generator))
            i, j, k = self._origins[si][oi]
            vols, mask = self._tensors[si]
            sl = (slice(i, i + p), slice(j, j + p), slice(k, k + p))
            xs.append(vols[FULL_DOSE][sl])
            ys.append(vols[ULTRA_LOW_DOSE][sl])
            ms.append(mask[sl])
            for f in anchor_doses:
                anchors[f].append(vols[f][sl])
        stack = lambda lst: torch.stack(lst)[:, None]
        return TrainBatch(
            x0=stack(xs),
            y=stack(ys),
            anchors={f: stack(v) for f, v in anchors.items()},
            mask=stack(ms),
        )


def loss_noise(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_pred.shape:
        raise ValueError("eps and eps_pred must have equal shapes")
    return torch.mean((eps - eps_pred) ** 2)


def loss_anchor(x0_hat: torch.Tensor, t: int, anchor_patch: torch.Tensor,
                ws: WeightSchedule, T: int) -> torch.Tensor:
    """Single-timestep anchor term: w(t) * MSE(x0_hat, a(t))."""
    w = weight(ws, t, T)
    return w * torch.mean((x0_hat - anchor_patch) ** 2)


def _gather(table: np.ndarray, ts: torch.Tensor, dtype) -> torch.Tensor:
    """Schedule coefficients for per-element timesteps, broadcast over voxels."""
    vals = torch.from_numpy(table[ts.numpy() - 1]).to(dtype)
    return vals[:, None, None, None, None]


def compute_losses(
    model: torch.nn.Module,
    batch: TrainBatch,
    ts: torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
    cfg: TrainConfig,
):
    """Per-batch (total, noise, anchor) losses for externally drawn (t, eps)."""
    dtype = batch.x0.dtype
    sqrt_ab = _gather(np.sqrt(sched.alpha_bar), ts, dtype)
    sqrt_1mab = _gather(np.sqrt(1.0 - sched.alpha_bar), ts, dtype)
    x_t = sqrt_ab * batch.x0 + sqrt_1mab * eps
    eps_pred = model(x_t, ts, batch.y)
    l_noise = loss_noise(eps, eps_pred)

    if not cfg.anchor_enabled:
        return l_noise, l_noise, None

    boundaries = cfg.boundaries
    anchor_doses = cfg.anchor_set.doses
    x0_hat = (x_t - sqrt_1mab * eps_pred) / sqrt_ab
    targets = torch.stack(
        [
            batch.anchors[anchor_doses[anchor_for_timestep(int(t), boundaries, cfg.anchor_set) - 1]][i]
            for i, t in enumerate(ts)
        ]
    )
    w = torch.from_numpy(
        np.asarray(weight(cfg.weight_schedule, ts.numpy(), sched.T), dtype=np.float64)
    ).to(dtype)
    per_elem = torch.mean((x0_hat - targets) ** 2, dim=(1, 2, 3, 4))
    l_anchor = torch.mean(w * per_elem)
    total = l_noise + cfg.lam * l_anchor
    return total, l_noise, l_anchor


def _derived_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def set_deterministic_mode() -> None:
    """Serialize reductions for run-to-run bitwise reproducibility."""
    torch.set_num_threads(1)


def train(
    subjects: list[MultiDoseSubject],
    cfg: TrainConfig,
    denoiser_cfg: DenoiserConfig,
    sched: NoiseSchedule,
    log_hook=None,
) -> tuple[Checkpoint, list[dict]]:
    """Run the Adam loop and return the final checkpoint plus per-step log."""
    if denoiser_cfg.num_timesteps != sched.T:
        raise ConfigError(
            f"denoiser num_timesteps {denoiser_cfg.num_timesteps} != schedule T {sched.T}"
        )
    denoiser_cfg.validate_patch(cfg.patch_size)
    if cfg.anchor_enabled:
        cfg.boundaries.validate_for(sched.T, cfg.anchor_set.n_anchors)
    if cfg.deterministic:
        set_deterministic_mode()

    torch.manual_seed(_derived_seed(cfg.seed, "init"))
    model = ConditionalDenoiser(denoiser_cfg)
    draw_gen = torch.Generator().manual_seed(_derived_seed(cfg.seed, "draws"))

    sampler = PatchSampler(subjects, cfg)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )

    log: list[dict] = []
    bucket_width = max(1, sched.T // 10)
    for step in range(1, cfg.steps + 1):
        batch = sampler.draw(draw_gen)
        ts = torch.randint(1, sched.T + 1, (cfg.batch_size,), generator=draw_gen)
        eps = torch.randn(batch.x0.shape, generator=draw_gen, dtype=batch.x0.dtype)
        total, l_noise, l_anchor = compute_losses(model, batch, ts, eps, sched, cfg)
        total_val = float(total.detach())
        if not np.isfinite(total_val):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        if total_val > cfg.divergence_guard:
            raise TrainingDiverged(
                f"loss {total_val:.3e} exceeded guard {cfg.divergence_guard:.1e} at step {step}"
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        record = {
            "step": step,
            "loss_noise": float(l_noise.detach()),
            "loss_anch": float(l_anchor.detach()) if l_anchor is not None else 0.0,
            "t_bucket": int(ts.float().mean()) // bucket_width,
        }
        log.append(record)
        if log_hook is not None:
            log_hook(record)

    config_snapshot = {
        "schedule": {
            "T": sched.T,
            "beta_start": float(sched.beta[0]),
            "beta_end": float(sched.beta[-1]),
        },
        "denoiser": denoiser_cfg.as_dict(),
        "train": {
            "steps": cfg.steps,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "lambda": cfg.lam,
            "weight": {"kind": cfg.weight_schedule.kind,
                       "p": cfg.weight_schedule.p, "c": cfg.weight_schedule.c},
            "anchor_doses": [str(d) for d in cfg.anchor_set.doses],
            "anchor_enabled": cfg.anchor_enabled,
            "boundaries": list(cfg.boundaries.taus) if cfg.boundaries else None,
            "patch_size": cfg.patch_size,
            "stride": cfg.stride,
            "norm_scale": cfg.norm_scale,
            "seed": cfg.seed,
        },
    }
    ckpt = checkpoint_from_model(
        model, config_snapshot, step_count=cfg.steps, rng_digest=rng_digest(draw_gen)
    )
    return ckpt, log


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """The same run with the anchor branch disabled (plain conditional DDPM)."""
    return replace(cfg, anchor_enabled=False, lam=0.0, boundaries=None)
