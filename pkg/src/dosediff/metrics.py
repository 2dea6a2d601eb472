"""Masked volumetric image-quality metrics and paired significance testing.

All metrics restrict to a body mask.  SSIM uses a uniform cubic window; a
window is counted when its center voxel is masked, and windows are clipped
at the volume border (local statistics renormalize to the in-bounds voxel
count).  PSNR takes its dynamic range from the masked reference maximum and
caps at 99 dB.  NMAE normalizes by the masked L1 mass of the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .volio import BodyMask, Volume

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
WILCOXON_EXACT_MAX_N = 25


def _as_data(x) -> np.ndarray:
    arr = x.data if isinstance(x, Volume) else np.asarray(x)
    return arr.astype(np.float64, copy=False)


def _as_flags(m) -> np.ndarray:
    return m.flags if isinstance(m, BodyMask) else np.asarray(m, dtype=bool)


def _check_dims(a, ref, m):
    if a.shape != ref.shape or a.shape != m.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {ref.shape} vs mask {m.shape}")


def nmae(a, ref, m) -> float:
    """Masked mean absolute error normalized by the masked reference L1 mass."""
    a, ref, m = _as_data(a), _as_data(ref), _as_flags(m)
    _check_dims(a, ref, m)
    denom = float(np.abs(ref[m]).sum())
    if denom == 0.0:
        raise ValueError("masked reference has zero L1 mass")
    return float(np.abs(a[m] - ref[m]).sum()) / denom


def psnr(a, ref, m) -> float:
    """Masked PSNR in dB with range = masked reference max, capped at 99 dB."""
    a, ref, m = _as_data(a), _as_data(ref), _as_flags(m)
    _check_dims(a, ref, m)
    peak = float(ref[m].max())
    if peak <= 0.0:
        raise ValueError("masked reference maximum must be positive")
    mse = float(np.square(a[m] - ref[m]).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def _box_sum(x: np.ndarray, w: int) -> np.ndarray:
    """Sum of x over a w^3 window centered per voxel, clipped at the border."""
    c = x
    for axis in range(3):
        c = np.cumsum(c, axis=axis)
    padded = np.zeros(tuple(s + 1 for s in x.shape), dtype=np.float64)
    padded[1:, 1:, 1:] = c
    half = w // 2
    lo = [np.clip(np.arange(s) - half, 0, None) for s in x.shape]
    hi = [np.clip(np.arange(s) + half + 1, None, s) for s in x.shape]
    out = np.zeros(x.shape, dtype=np.float64)
    for di, ai in ((1, 0), (-1, 1)):
        ii = (hi if ai == 0 else lo)[0]
        for dj, aj in ((1, 0), (-1, 1)):
            jj = (hi if aj == 0 else lo)[1]
            for dk, ak in ((1, 0), (-1, 1)):
                kk = (hi if ak == 0 else lo)[2]
                out += (di * dj * dk) * padded[np.ix_(ii, jj, kk)]
    return out


def ssim(a, ref, m, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over masked voxel centers, uniform cubic window."""
    a, ref, m = _as_data(a), _as_data(ref), _as_flags(m)
    _check_dims(a, ref, m)
    if window % 2 != 1 or window < 3:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if min(a.shape) < window:
        raise ValueError(f"dims {a.shape} smaller than SSIM window {window}")
    peak = float(ref[m].max())
    if peak <= 0.0:
        raise ValueError("masked reference maximum must be positive")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    n = _box_sum(np.ones(a.shape), window)
    mu_a = _box_sum(a, window) / n
    mu_b = _box_sum(ref, window) / n
    # Sample (n-1) normalization, matching the literal per-window estimator.
    var_a = (_box_sum(a * a, window) - n * mu_a**2) / (n - 1)
    var_b = (_box_sum(ref * ref, window) - n * mu_b**2) / (n - 1)
    cov = (_box_sum(a * ref, window) - n * mu_a * mu_b) / (n - 1)

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den)[m].mean())


@dataclass(frozen=True)
class Signature:
    """Two-component degradation signature vs a full-dose reference."""

    nmae_component: float
    ssim_complement: float

    def __post_init__(self):
        if not (math.isfinite(self.nmae_component) and math.isfinite(self.ssim_complement)):
            raise ValueError("signature components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.nmae_component, self.ssim_complement])

    def distance(self, other: "Signature") -> float:
        return float(np.linalg.norm(self.as_array() - other.as_array()))


def signature(a, ref, m) -> Signature:
    return Signature(
        nmae_component=nmae(a, ref, m),
        ssim_complement=1.0 - ssim(a, ref, m),
    )


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    nmae: float
    n_voxels_masked: int

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim out of range: {self.ssim}")
        if self.nmae < 0.0:
            raise ValueError(f"nmae must be nonnegative: {self.nmae}")

    def as_dict(self) -> dict:
        return {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "nmae": self.nmae,
            "n_voxels_masked": self.n_voxels_masked,
        }


def metric_report(a, ref, m) -> MetricReport:
    return MetricReport(
        psnr=psnr(a, ref, m),
        ssim=ssim(a, ref, m),
        nmae=nmae(a, ref, m),
        n_voxels_masked=int(_as_flags(m).sum()),
    )


def _signed_rank_statistic(diffs: np.ndarray):
    """Drop zeros, average-rank ties; returns (W+, ranks) or None if all zero."""
    nz = diffs[diffs != 0.0]
    if nz.size == 0:
        return None
    ranks = rankdata(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    return w_plus, ranks


def _exact_signed_rank_p(w_plus: float, ranks: np.ndarray) -> float:
    """Two-sided p from the full sign-assignment distribution of W+.

    Doubled ranks are integers even under average-rank ties, so the null
    distribution is built by integer convolution over 2^n assignments.
    """
    r2 = np.rint(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    w2 = int(np.rint(2.0 * w_plus))
    n_total = counts.sum()
    p_le = counts[: w2 + 1].sum() / n_total
    p_ge = counts[w2:].sum() / n_total
    return float(min(1.0, 2.0 * min(p_le, p_ge)))


def _normal_signed_rank_p(w_plus: float, ranks: np.ndarray) -> float:
    """Two-sided normal approximation with tie variance correction."""
    n = ranks.size
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    if var <= 0.0:
        return 1.0
    z = (w_plus - mean) / math.sqrt(var)
    return math.erfc(abs(z) / math.sqrt(2.0))


def wilcoxon_signed_rank(scores, reference) -> float:
    """Two-sided signed-rank p-value for paired samples.

    Exact sign-enumeration distribution up to n=25 nonzero differences,
    normal approximation with tie correction above.  All-zero differences
    give p = 1.0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if scores.shape != reference.shape:
        raise ValueError("paired score lists must have equal length")
    if scores.size < 5:
        raise ValueError(f"need at least 5 paired samples, got {scores.size}")
    stat = _signed_rank_statistic(scores - reference)
    if stat is None:
        return 1.0
    w_plus, ranks = stat
    if ranks.size <= WILCOXON_EXACT_MAX_N:
        return _exact_signed_rank_p(w_plus, ranks)
    return _normal_signed_rank_p(w_plus, ranks)


def holm_adjust(raw: dict[str, float]) -> dict[str, float]:
    """Holm step-down adjustment across a family of raw p-values."""
    items = sorted(raw.items(), key=lambda kv: kv[1])
    m = len(items)
    adjusted = {}
    running = 0.0
    for i, (name, p) in enumerate(items):
        running = max(running, (m - i) * float(p))
        adjusted[name] = min(1.0, running)
    return adjusted


def wilcoxon_holm(per_method_scores: dict[str, list], reference_method: str) -> dict[str, float]:
    """Holm-adjusted two-sided signed-rank p per method vs the reference."""
    if reference_method not in per_method_scores:
        raise ValueError(f"reference method {reference_method!r} missing from scores")
    ref = per_method_scores[reference_method]
    raw = {
        name: wilcoxon_signed_rank(vals, ref)
        for name, vals in per_method_scores.items()
        if name != reference_method
    }
    return holm_adjust(raw)
