"""Metric oracle tests: each fast path must match a literal re-implementation."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dosediff.metrics import (
    PSNR_CAP_DB,
    MetricReport,
    Signature,
    holm_adjust,
    metric_report,
    nmae,
    psnr,
    signature,
    ssim,
    wilcoxon_holm,
    wilcoxon_signed_rank,
)


def _rand(shape, seed, low=0.0, high=1.0):
    return np.random.default_rng(seed).uniform(low, high, size=shape)


def _full_mask(shape):
    return np.ones(shape, dtype=bool)


class TestNmae:
    def test_identity_is_zero(self):
        x = _rand((6, 6, 6), 0)
        assert nmae(x, x, _full_mask(x.shape)) == 0.0

    def test_uniform_scaling(self):
        ref = np.full((6, 6, 6), 2.0)
        assert nmae(1.1 * ref, ref, _full_mask(ref.shape)) == pytest.approx(0.1)

    def test_matches_elementwise_oracle(self):
        a, ref = _rand((5, 5, 5), 1), _rand((5, 5, 5), 2, low=0.1)
        m = _rand((5, 5, 5), 3) > 0.4
        expected_num = sum(
            abs(a[i] - ref[i]) for i in itertools.product(range(5), repeat=3) if m[i]
        )
        expected_den = sum(
            abs(ref[i]) for i in itertools.product(range(5), repeat=3) if m[i]
        )
        assert nmae(a, ref, m) == pytest.approx(expected_num / expected_den, rel=1e-12)

    def test_zero_reference_rejected(self):
        z = np.zeros((4, 4, 4))
        with pytest.raises(ValueError, match="zero"):
            nmae(z, z, _full_mask(z.shape))

    def test_ignores_voxels_outside_mask(self):
        a, ref = _rand((5, 5, 5), 1), _rand((5, 5, 5), 2, low=0.1)
        m = _rand((5, 5, 5), 3) > 0.4
        a2 = a.copy()
        a2[~m] += 100.0
        assert nmae(a, ref, m) == nmae(a2, ref, m)
        assert psnr(a, ref, m) == psnr(a2, ref, m)


class TestPsnr:
    def test_identity_hits_cap(self):
        x = _rand((6, 6, 6), 0, low=0.1)
        assert psnr(x, x, _full_mask(x.shape)) == PSNR_CAP_DB

    def test_uniform_error_closed_form(self):
        ref = np.zeros((6, 6, 6))
        ref[0, 0, 0] = 1.0
        a = ref + 0.1
        assert psnr(a, ref, _full_mask(ref.shape)) == pytest.approx(20.0)

    def test_matches_direct_recomputation(self):
        a, ref = _rand((5, 5, 5), 4), _rand((5, 5, 5), 5, low=0.1)
        m = _rand((5, 5, 5), 6) > 0.3
        mse = float(np.mean((a[m] - ref[m]) ** 2))
        expected = 10 * math.log10(float(ref[m].max()) ** 2 / mse)
        assert psnr(a, ref, m) == pytest.approx(expected, abs=1e-9)

    def test_zero_peak_rejected(self):
        z = np.zeros((4, 4, 4))
        a = z + 0.5
        with pytest.raises(ValueError, match="positive"):
            psnr(a, z, _full_mask(z.shape))

    def test_noise_monotonicity(self):
        ref = _rand((6, 6, 6), 7, low=0.2)
        noise = _rand((6, 6, 6), 8, low=-0.5, high=0.5)
        m = _full_mask(ref.shape)
        p = [psnr(ref + amp * noise, ref, m) for amp in (0.05, 0.1, 0.2)]
        n = [nmae(ref + amp * noise, ref, m) for amp in (0.05, 0.1, 0.2)]
        assert p[0] > p[1] > p[2]
        assert n[0] < n[1] < n[2]


def _ssim_oracle(a, ref, m, window=7):
    """Literal sliding-window SSIM with border clipping, for small volumes."""
    peak = ref[m].max()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    half = window // 2
    dims = a.shape
    vals = []
    for center in itertools.product(*(range(d) for d in dims)):
        if not m[center]:
            continue
        sl = tuple(
            slice(max(0, c - half), min(d, c + half + 1)) for c, d in zip(center, dims)
        )
        wa, wb = a[sl].ravel(), ref[sl].ravel()
        n = wa.size
        mu_a, mu_b = wa.mean(), wb.mean()
        var_a = ((wa - mu_a) ** 2).sum() / (n - 1)
        var_b = ((wb - mu_b) ** 2).sum() / (n - 1)
        cov = ((wa - mu_a) * (wb - mu_b)).sum() / (n - 1)
        vals.append(
            ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
            / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
        )
    return float(np.mean(vals))


class TestSsim:
    def test_identity_is_one(self):
        x = _rand((8, 8, 8), 0, low=0.1)
        assert ssim(x, x, _full_mask(x.shape)) == pytest.approx(1.0)

    def test_constant_shift_penalized(self):
        x = _rand((8, 8, 8), 1, low=0.1)
        assert ssim(x + 0.3, x, _full_mask(x.shape)) < 1.0

    def test_matches_sliding_window_oracle(self):
        a, ref = _rand((8, 8, 8), 2), _rand((8, 8, 8), 3, low=0.1)
        m = _rand((8, 8, 8), 4) > 0.3
        assert ssim(a, ref, m) == pytest.approx(_ssim_oracle(a, ref, m), abs=1e-6)

    def test_masked_center_convention_oracle(self):
        # windows may straddle unmasked voxels; only centers are filtered
        a, ref = _rand((9, 9, 9), 5), _rand((9, 9, 9), 6, low=0.1)
        m = np.zeros((9, 9, 9), dtype=bool)
        m[3:6, 3:6, 3:6] = True
        assert ssim(a, ref, m) == pytest.approx(_ssim_oracle(a, ref, m), abs=1e-6)

    def test_small_volume_rejected(self):
        x = _rand((5, 8, 8), 7, low=0.1)
        with pytest.raises(ValueError, match="window"):
            ssim(x, x, _full_mask(x.shape))


class TestSignature:
    def test_identity_is_origin(self):
        x = _rand((8, 8, 8), 0, low=0.1)
        sig = signature(x, x, _full_mask(x.shape))
        assert sig.nmae_component == 0.0
        assert sig.ssim_complement == pytest.approx(0.0, abs=1e-12)

    def test_components_nonnegative(self):
        a, ref = _rand((8, 8, 8), 1), _rand((8, 8, 8), 2, low=0.1)
        sig = signature(a, ref, _full_mask(a.shape))
        assert sig.nmae_component >= 0.0
        assert sig.ssim_complement >= 0.0

    def test_distance_is_euclidean(self):
        s1 = Signature(0.1, 0.1)
        s2 = Signature(0.4, 0.5)
        assert s1.distance(s2) == pytest.approx(0.5)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            Signature(float("nan"), 0.0)


class TestMetricReport:
    def test_report_fields(self):
        a, ref = _rand((8, 8, 8), 1), _rand((8, 8, 8), 2, low=0.1)
        m = _rand((8, 8, 8), 3) > 0.3
        rep = metric_report(a, ref, m)
        assert rep.n_voxels_masked == int(m.sum())
        assert rep.psnr == psnr(a, ref, m)
        assert rep.ssim == ssim(a, ref, m)
        assert rep.nmae == nmae(a, ref, m)

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ValueError, match="ssim"):
            MetricReport(psnr=30.0, ssim=1.5, nmae=0.1, n_voxels_masked=10)
        with pytest.raises(ValueError, match="nmae"):
            MetricReport(psnr=30.0, ssim=0.9, nmae=-0.1, n_voxels_masked=10)


def _enumerate_signed_rank_p(diffs):
    """Oracle: exact two-sided p over all 2^n sign assignments."""
    from scipy.stats import rankdata

    nz = np.asarray([d for d in diffs if d != 0.0], dtype=np.float64)
    if nz.size == 0:
        return 1.0
    ranks = rankdata(np.abs(nz))
    w_obs = ranks[nz > 0].sum()
    ws = []
    for signs in itertools.product((0, 1), repeat=nz.size):
        ws.append(sum(r for r, s in zip(ranks, signs) if s))
    ws = np.asarray(ws)
    p_le = (ws <= w_obs + 1e-9).mean()
    p_ge = (ws >= w_obs - 1e-9).mean()
    return min(1.0, 2.0 * min(p_le, p_ge))


class TestWilcoxon:
    def test_identical_scores_give_one(self):
        x = [1.0, 2.0, 3.0, 4.0, 5.0]
        assert wilcoxon_signed_rank(x, x) == 1.0

    def test_six_positive_differences(self):
        ref = [0.0] * 6
        scores = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        assert wilcoxon_signed_rank(scores, ref) == pytest.approx(2.0 / 64.0)

    def test_needs_five_samples(self):
        with pytest.raises(ValueError, match="5"):
            wilcoxon_signed_rank([1.0, 2.0], [0.0, 0.0])

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(5, 10),
        seed=st.integers(0, 2**31),
        with_ties=st.booleans(),
    )
    def test_exact_mode_matches_enumeration(self, n, seed, with_ties):
        rng = np.random.default_rng(seed)
        if with_ties:
            diffs = rng.integers(-3, 4, size=n).astype(float)
        else:
            diffs = rng.normal(size=n)
        expected = _enumerate_signed_rank_p(diffs)
        got = wilcoxon_signed_rank(diffs, np.zeros(n))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_normal_approximation_path(self):
        rng = np.random.default_rng(0)
        diffs = rng.normal(0.8, 1.0, size=40)
        p = wilcoxon_signed_rank(diffs, np.zeros(40))
        assert 0.0 < p < 0.01


class TestHolm:
    def test_two_family_example(self):
        adjusted = holm_adjust({"a": 0.01, "b": 0.04})
        assert adjusted["a"] == pytest.approx(0.02)
        assert adjusted["b"] == pytest.approx(0.04)

    def test_monotone_and_capped(self):
        adjusted = holm_adjust({"a": 0.5, "b": 0.6, "c": 0.01})
        assert adjusted["c"] == pytest.approx(0.03)
        assert adjusted["a"] == pytest.approx(1.0)
        assert adjusted["b"] == pytest.approx(1.0)

    def test_step_down_by_hand(self):
        # sorted p: .001, .02, .03, m=3 -> (3*.001, max(.003, 2*.02), max(.04, 1*.03))
        adjusted = holm_adjust({"x": 0.02, "y": 0.001, "z": 0.03})
        assert adjusted["y"] == pytest.approx(0.003)
        assert adjusted["x"] == pytest.approx(0.04)
        assert adjusted["z"] == pytest.approx(0.04)


class TestWilcoxonHolm:
    def test_reference_excluded_and_adjusted(self):
        scores = {
            "ref": [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            "same": [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            "worse": [0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        }
        out = wilcoxon_holm(scores, reference_method="ref")
        assert set(out) == {"same", "worse"}
        assert out["same"] == 1.0
        assert out["worse"] == pytest.approx(min(1.0, 2 * 2.0 / 64.0))

    def test_missing_reference_rejected(self):
        with pytest.raises(ValueError, match="reference"):
            wilcoxon_holm({"a": [1.0] * 5}, reference_method="b")
