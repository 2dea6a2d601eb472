"""Timestep zoning and boundary calibration by degradation matching.

The timestep axis [0, T] is split into left-closed zones by strictly
decreasing boundaries (tau_1 > tau_2 > ... >= 0), one fewer than the number
of anchors.  High-noise timesteps map to the lowest-dose anchor; everything
below the last boundary maps to the full-dose target.

Calibration matches each anchor's observed degradation signature (NMAE,
1-SSIM vs full dose) against the signature of the diffusion-corrupted full
dose over a timestep sweep, then averages the matched timesteps across
subjects.  Signatures are computed on the normalized intensity scale used
for training, since the forward corruption operates in that space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import CalibrationError
from .metrics import Signature, signature
from .phantom import MultiDoseSubject
from .schedule import NoiseSchedule, forward_sample
from .volio import FULL_DOSE, BodyMask, Volume

DEFAULT_ANCHOR_DOSES = (Fraction(1, 10), Fraction(1, 4), Fraction(1, 2), FULL_DOSE)


@dataclass(frozen=True)
class AnchorSet:
    """Strictly increasing dose anchors; the last one is always full dose."""

    doses: tuple[Fraction, ...] = DEFAULT_ANCHOR_DOSES

    def __post_init__(self):
        if not self.doses:
            raise ValueError("anchor set must be nonempty")
        if self.doses[-1] != FULL_DOSE:
            raise ValueError("the final anchor must be the full dose")
        if any(a >= b for a, b in zip(self.doses, self.doses[1:])):
            raise ValueError(f"anchor doses must be strictly increasing: {self.doses}")

    @classmethod
    def from_partial(cls, partial_doses) -> "AnchorSet":
        """Build from the non-full anchors, appending the full dose."""
        doses = tuple(sorted(Fraction(d) for d in partial_doses))
        return cls(doses=doses + (FULL_DOSE,))

    @property
    def n_anchors(self) -> int:
        return len(self.doses)

    @property
    def partial_doses(self) -> tuple[Fraction, ...]:
        return self.doses[:-1]


@dataclass(frozen=True)
class ZoneBoundaries:
    """Strictly decreasing zone boundaries tau_1 > tau_2 > ... >= 0."""

    taus: tuple[int, ...]

    def __post_init__(self):
        taus = tuple(int(t) for t in self.taus)
        if any(t < 0 for t in taus):
            raise ValueError(f"boundaries must be nonnegative: {taus}")
        if any(a <= b for a, b in zip(taus, taus[1:])):
            raise ValueError(f"boundaries must be strictly decreasing: {taus}")
        object.__setattr__(self, "taus", taus)

    def validate_for(self, T: int, n_anchors: int) -> None:
        if len(self.taus) != n_anchors - 1:
            raise ValueError(
                f"{n_anchors} anchors need {n_anchors - 1} boundaries, got {len(self.taus)}"
            )
        if self.taus and self.taus[0] >= T:
            raise ValueError(f"largest boundary {self.taus[0]} must be < T={T}")


def anchor_for_timestep(t: int, boundaries: ZoneBoundaries, anchor_set: AnchorSet) -> int:
    """1-based anchor index j whose zone contains t; total on [0, T]."""
    if t < 0:
        raise ValueError(f"timestep {t} must be >= 0")
    for j, tau in enumerate(boundaries.taus, start=1):
        if t >= tau:
            return j
    return anchor_set.n_anchors


def nearest_signature(target: Signature, table: list[tuple[int, Signature]]) -> int:
    """Sweep timestep whose signature is Euclidean-closest; ties pick smaller t."""
    if not table:
        raise ValueError("signature sweep table is empty")
    best_t, best_d = None, None
    for t, sig in sorted(table, key=lambda ts: ts[0]):
        d = target.distance(sig)
        if best_d is None or d < best_d:
            best_t, best_d = t, d
    return best_t


def sweep_signatures(
    x0: Volume,
    sched: NoiseSchedule,
    mask: BodyMask,
    sweep,
    seed: int,
    norm_scale: float,
) -> list[tuple[int, Signature]]:
    """Signature of the diffusion-corrupted full dose at each sweep timestep.

    One fixed-seed noise draw per (seed, t); corruption is applied on the
    normalized scale x0 / norm_scale.
    """
    sweep = [int(t) for t in sweep]
    if not sweep:
        raise ValueError("timestep sweep must be nonempty")
    x0n = x0.data.astype(np.float64) / norm_scale
    table = []
    for t in sweep:
        rng = np.random.default_rng(np.random.SeedSequence((seed, t)))
        eps = rng.standard_normal(x0n.shape)
        x_t = forward_sample(x0n, t, eps, sched)
        table.append((t, signature(x_t, x0n, mask)))
    return table


def clinical_signature(a_j: Volume, x0: Volume, mask: BodyMask, norm_scale: float) -> Signature:
    return signature(
        a_j.data.astype(np.float64) / norm_scale,
        x0.data.astype(np.float64) / norm_scale,
        mask,
    )


def match_timestep(
    a_j: Volume,
    x0: Volume,
    sched: NoiseSchedule,
    mask: BodyMask,
    sweep,
    seed: int,
    norm_scale: float,
) -> int:
    """Sweep timestep whose corruption signature best matches the dose signature."""
    table = sweep_signatures(x0, sched, mask, sweep, seed, norm_scale)
    return nearest_signature(clinical_signature(a_j, x0, mask, norm_scale), table)


@dataclass(frozen=True)
class CalibrationResult:
    boundaries: ZoneBoundaries
    per_subject_matches: dict[tuple[str, Fraction], int] = field(repr=False)
    per_dose_tau: dict[Fraction, int] = field(repr=False)
    signature_tables: dict[str, list[tuple[int, Signature]]] = field(repr=False)
    sweep_stride: int = 10
    seed: int = 0
    norm_scale: float = 1.0

    def boundaries_for(self, anchor_set: AnchorSet) -> ZoneBoundaries:
        """Boundaries for any anchor subset, from the per-dose averages."""
        missing = [d for d in anchor_set.partial_doses if d not in self.per_dose_tau]
        if missing:
            raise CalibrationError(f"no calibrated boundary for doses {missing}")
        taus = tuple(self.per_dose_tau[d] for d in sorted(anchor_set.partial_doses))
        return ZoneBoundaries(taus=taus)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def aggregate_boundaries(
    matches: dict[tuple[str, Fraction], int], partial_doses
) -> tuple[ZoneBoundaries, dict[Fraction, int]]:
    """Mean-then-round per dose; boundaries must come out strictly decreasing."""
    per_dose_tau = {}
    for dose in partial_doses:
        vals = [t for (_, d), t in matches.items() if d == dose]
        if not vals:
            raise CalibrationError(f"no matches recorded for dose {dose}")
        per_dose_tau[dose] = _round_half_up(float(np.mean(vals)))
    ordered = [per_dose_tau[d] for d in sorted(per_dose_tau)]
    if sorted(ordered, reverse=True) != ordered or len(set(ordered)) != len(ordered):
        raise CalibrationError(
            "calibrated boundaries are not strictly decreasing in dose order: "
            + ", ".join(f"{d}->{per_dose_tau[d]}" for d in sorted(per_dose_tau))
            + " (degradation levels too flat to separate; adjust phantom count_scale)"
        )
    return ZoneBoundaries(taus=tuple(ordered)), per_dose_tau


def calibrate(
    subjects: list[MultiDoseSubject],
    anchor_set: AnchorSet,
    sched: NoiseSchedule,
    sweep_stride: int,
    seed: int,
    norm_scale: float,
) -> CalibrationResult:
    """Match every (subject, anchor) pair, then average matches into boundaries."""
    if not subjects:
        raise ValueError("calibration needs at least one subject")
    if sweep_stride < 1:
        raise ValueError(f"sweep stride must be >= 1, got {sweep_stride}")
    sweep = list(range(1, sched.T + 1, sweep_stride))
    matches: dict[tuple[str, Fraction], int] = {}
    tables: dict[str, list[tuple[int, Signature]]] = {}
    for idx, subject in enumerate(subjects):
        subject_seed = int(np.random.SeedSequence((seed, idx)).generate_state(1)[0])
        x0 = subject.volumes[FULL_DOSE]
        table = sweep_signatures(x0, sched, subject.mask, sweep, subject_seed, norm_scale)
        tables[subject.subject_id] = table
        for dose in anchor_set.partial_doses:
            d_clin = clinical_signature(subject.volumes[dose], x0, subject.mask, norm_scale)
            matches[(subject.subject_id, dose)] = nearest_signature(d_clin, table)
    boundaries, per_dose_tau = aggregate_boundaries(matches, anchor_set.partial_doses)
    boundaries.validate_for(sched.T, anchor_set.n_anchors)
    return CalibrationResult(
        boundaries=boundaries,
        per_subject_matches=matches,
        per_dose_tau=per_dose_tau,
        signature_tables=tables,
        sweep_stride=sweep_stride,
        seed=seed,
        norm_scale=norm_scale,
    )
