"""Reverse-process inference with progressive intermediate export.

Sampling starts from pure noise conditioned on the ultra-low-dose input and
walks the full reverse trajectory.  At each calibrated boundary timestep the
clean estimate x0_hat(x_t, t | y) is recorded, yielding intermediate volumes
aligned with the anchor dose levels; the final output is the state after the
t=1 step.  Patches are sampled independently with origin-derived seeds, so
results are identical regardless of execution order or grid overlap, and are
stitched by uniform averaging.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .anchors import ZoneBoundaries
from .denoiser import Checkpoint, ConditionalDenoiser, model_from_checkpoint
from .errors import ConfigError, SamplingError
from .schedule import NoiseSchedule, predict_x0, reverse_step
from .volio import ESTIMATE, PatchGrid, Volume, extract_patch, stitch_patches


@dataclass(frozen=True)
class ProgressiveOutput:
    """Final estimate plus the clean estimates recorded at each boundary."""

    final: Volume
    intermediates: dict[int, Volume] = field(repr=False)
    trace: list[dict] | None = None


def _check_boundaries(boundaries: ZoneBoundaries, T: int) -> None:
    if any(not 1 <= tau <= T for tau in boundaries.taus):
        raise ConfigError(f"boundaries {boundaries.taus} must lie in [1, {T}]")


def patch_seed(seed: int, origin) -> int:
    """Stable per-patch seed so parallel order never affects results."""
    key = f"{seed}:{origin[0]}:{origin[1]}:{origin[2]}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def sample_patch(
    model: ConditionalDenoiser,
    y_patch: torch.Tensor,
    sched: NoiseSchedule,
    boundaries: ZoneBoundaries,
    seed: int,
    timesteps=None,
    record_trace: bool = False,
):
    """Reverse trajectory for one normalized patch.

    Returns (final, intermediates, trace) as tensors keyed by boundary
    timestep.  With a thinned `timesteps` subset, a boundary that is never
    visited is recorded at the nearest visited t >= tau and the trace notes
    the substitution.
    """
    _check_boundaries(boundaries, sched.T)
    if timesteps is None:
        visited = list(range(sched.T, 0, -1))
    else:
        visited = [int(t) for t in timesteps]
        if visited != sorted(set(visited), reverse=True):
            raise ConfigError("timesteps must be strictly decreasing")
        if visited[-1] != 1 or any(not 1 <= t <= sched.T for t in visited):
            raise ConfigError(f"timesteps must end at 1 and lie in [1, {sched.T}]")

    generator = torch.Generator().manual_seed(seed)
    x = torch.randn(y_patch.shape, generator=generator, dtype=y_patch.dtype)
    pending = sorted(boundaries.taus, reverse=True)
    intermediates: dict[int, torch.Tensor] = {}
    trace: list[dict] = [] if record_trace else None

    with torch.no_grad():
        for idx, t in enumerate(visited):
            eps_pred = model(x, t, y_patch)
            next_t = visited[idx + 1] if idx + 1 < len(visited) else 0
            while pending and t >= pending[0] > next_t:
                tau = pending.pop(0)
                intermediates[tau] = predict_x0(x, t, eps_pred, sched)
                if record_trace:
                    trace.append({"event": "record", "tau": tau, "visited_t": t})
            if t > 1:
                z = torch.randn(x.shape, generator=generator, dtype=x.dtype)
            else:
                z = None
            x = reverse_step(x, t, eps_pred, z, sched)
            if not torch.isfinite(x).all():
                raise SamplingError(f"non-finite state after reverse step t={t}")
            if record_trace:
                trace.append({"event": "step", "t": t, "max_abs": float(x.abs().max())})
    return x, intermediates, trace


class OracleDenoiser:
    """Noise prediction implied by a known clean tensor; the sampler test oracle.

    With x0=None the conditioning patch itself is taken as the clean target,
    which keeps the oracle well-defined across arbitrary patch grids.
    """

    def __init__(self, x0: torch.Tensor | None, sched: NoiseSchedule):
        self.x0 = x0
        self.sched = sched

    def __call__(self, x_t, t, y):
        ab = self.sched.alpha_bar_at(int(t) if not torch.is_tensor(t) else int(t.reshape(-1)[0]))
        target = self.x0 if self.x0 is not None else y
        return (x_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)


def sample_volume(
    ckpt_or_model,
    y: Volume,
    grid: PatchGrid,
    sched: NoiseSchedule,
    boundaries: ZoneBoundaries,
    seed: int,
    norm_scale: float,
    record_trace: bool = False,
) -> ProgressiveOutput:
    """Patchwise progressive sampling of a whole volume, in activity units."""
    _check_boundaries(boundaries, sched.T)
    if isinstance(ckpt_or_model, Checkpoint):
        model = model_from_checkpoint(ckpt_or_model)
    else:
        model = ckpt_or_model
    if hasattr(model, "eval"):
        model.eval()

    dims = y.dims
    y_norm = (y.data / norm_scale).astype(np.float32)
    final_patches = []
    inter_patches: dict[int, list] = {tau: [] for tau in boundaries.taus}
    traces = [] if record_trace else None
    for origin in grid.origins:
        yp = torch.from_numpy(extract_patch(y_norm, origin, grid.patch_size))[None, None]
        final, inters, trace = sample_patch(
            model, yp, sched, boundaries, patch_seed(seed, origin), record_trace=record_trace
        )
        final_patches.append(final[0, 0].numpy())
        for tau in boundaries.taus:
            inter_patches[tau].append(inters[tau][0, 0].numpy())
        if record_trace:
            traces.append({"origin": list(origin), "trace": trace})

    def to_volume(patches) -> Volume:
        stitched = stitch_patches(patches, grid, dims) * norm_scale
        return Volume(data=stitched, spacing=y.spacing, dose_fraction=ESTIMATE)

    return ProgressiveOutput(
        final=to_volume(final_patches),
        intermediates={tau: to_volume(inter_patches[tau]) for tau in boundaries.taus},
        trace=traces,
    )
