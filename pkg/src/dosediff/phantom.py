"""Synthetic multi-dose subjects via Poisson thinning of a piecewise phantom.

Each subject is a body ellipsoid with modulated interior structures and a
few bright lesions.  Dose levels are independent Poisson realizations of the
same activity field: counts ~ Poisson(f * count_scale * activity), rescaled
back to activity units, so the output is unbiased and its relative noise
grows like 1/sqrt(f).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .volio import (
    DOSE_LADDER,
    ESTIMATE,
    BodyMask,
    Volume,
)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    n_ellipsoids: int = 2
    n_lesions: int = 1
    background_activity: float = 1.0
    lesion_activity: float = 3.0
    count_scale: float = 5.0

    def __post_init__(self):
        if min(self.dims) < 8:
            raise ValueError(f"dims must be >= 8 per axis, got {self.dims}")
        if self.lesion_activity <= self.background_activity:
            raise ValueError("lesion_activity must exceed background_activity")
        if self.count_scale <= 0:
            raise ValueError("count_scale must be positive")


@dataclass(frozen=True)
class MultiDoseSubject:
    subject_id: str
    volumes: dict[Fraction, Volume] = field(repr=False)
    mask: BodyMask = field(repr=False)
    ground_truth: Volume = field(repr=False)

    def __post_init__(self):
        if set(self.volumes) != set(DOSE_LADDER):
            raise ValueError("subject must carry exactly the five ladder doses")
        dims = self.ground_truth.dims
        if any(v.dims != dims for v in self.volumes.values()) or self.mask.dims != dims:
            raise ValueError("all subject volumes and the mask must share dims")


def _subject_seeds(seed: int):
    """One child seed for geometry plus one per dose level, all from `seed`."""
    children = np.random.SeedSequence(seed).spawn(1 + len(DOSE_LADDER))
    return children[0], dict(zip(DOSE_LADDER, children[1:]))


def _ellipsoid(coords, center, semi) -> np.ndarray:
    x, y, z = coords
    return (
        ((x - center[0]) / semi[0]) ** 2
        + ((y - center[1]) / semi[1]) ** 2
        + ((z - center[2]) / semi[2]) ** 2
    ) <= 1.0


def generate_ground_truth(spec: PhantomSpec) -> tuple[Volume, BodyMask]:
    """Noiseless activity field and its exact support mask."""
    geom_seed, _ = _subject_seeds(spec.seed)
    rng = np.random.default_rng(geom_seed)
    dims = spec.dims
    coords = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    center = [(d - 1) / 2.0 for d in dims]
    semi = [d * rng.uniform(0.38, 0.44) for d in dims]
    body = _ellipsoid(coords, center, semi)

    activity = np.zeros(dims, dtype=np.float64)
    activity[body] = spec.background_activity

    for _ in range(spec.n_ellipsoids):
        e_center = [c + rng.uniform(-0.5, 0.5) * a for c, a in zip(center, semi)]
        e_semi = [max(1.5, d * rng.uniform(0.10, 0.22)) for d in dims]
        modulation = rng.uniform(0.7, 1.3)
        inside = _ellipsoid(coords, e_center, e_semi) & body
        activity[inside] = spec.background_activity * modulation

    body_idx = np.argwhere(body)
    for _ in range(spec.n_lesions):
        placed = False
        for _attempt in range(50):
            radius = rng.uniform(1.2, 2.0)
            pick = body_idx[rng.integers(len(body_idx))]
            sphere = _ellipsoid(coords, pick.astype(np.float64), [radius] * 3)
            if sphere.any() and (body[sphere]).all():
                activity[sphere] = spec.lesion_activity
                placed = True
                break
        if not placed:
            raise ValueError("could not place a lesion inside the body after 50 tries")

    return Volume(data=activity, dose_fraction=ESTIMATE), BodyMask(flags=body)


def simulate_dose(gt: Volume, f: Fraction, count_scale: float, seed) -> Volume:
    """Unbiased Poisson-thinned acquisition at dose fraction f."""
    if not 0 < f <= 1:
        raise ValueError(f"dose fraction must be in (0, 1], got {f}")
    if (gt.data < 0).any():
        raise ValueError("ground truth activity must be nonnegative")
    rng = np.random.default_rng(seed)
    lam = float(f) * count_scale * gt.data.astype(np.float64)
    counts = rng.poisson(lam)
    return gt.with_data(counts / (float(f) * count_scale), dose_fraction=f)


def generate_subject(spec: PhantomSpec, subject_id: str = "subject") -> MultiDoseSubject:
    gt, mask = generate_ground_truth(spec)
    _, dose_seeds = _subject_seeds(spec.seed)
    volumes = {
        f: simulate_dose(gt, f, spec.count_scale, dose_seeds[f]) for f in DOSE_LADDER
    }
    return MultiDoseSubject(
        subject_id=subject_id, volumes=volumes, mask=mask, ground_truth=gt
    )


def cohort_seed(base_seed: int, index: int) -> int:
    """Stable per-subject seed derived from a cohort base seed."""
    return int(np.random.SeedSequence((base_seed, index)).generate_state(1)[0])


def generate_cohort(spec: PhantomSpec, n: int, prefix: str = "subj") -> list[MultiDoseSubject]:
    subjects = []
    for i in range(n):
        sub_spec = replace(spec, seed=cohort_seed(spec.seed, i))
        subjects.append(generate_subject(sub_spec, subject_id=f"{prefix}_{i:02d}"))
    return subjects
