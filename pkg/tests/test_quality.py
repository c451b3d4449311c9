"""PSNR/SSIM quality metrics and confidence-interval summaries."""

import math

import numpy as np
import pytest

from morphbench.autodiff import ShapeError
from morphbench.losses import MsSsimParams
from morphbench.quality import (
    CiSummary,
    QualityRecord,
    morph_quality,
    psnr,
    ssim_global,
    summarize_ci,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# psnr


def test_psnr_identical_images_is_inf():
    x = rng(1).uniform(0, 1, (8, 8))
    assert math.isinf(psnr(x, x))


def test_psnr_zero_db_when_mse_equals_peak_squared():
    x = np.zeros((4, 4))
    ref = np.ones((4, 4))  # MSE = 1 = peak^2
    assert psnr(x, ref, peak=1.0) == pytest.approx(0.0, abs=1e-12)


def test_psnr_constant_offset_closed_form():
    x = np.zeros((6, 6))
    ref = np.full((6, 6), 0.5)  # MSE = 0.25 -> 10*log10(4)
    assert psnr(x, ref, peak=1.0) == pytest.approx(10 * math.log10(4.0), abs=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((5, 4)))


def test_psnr_monotone_in_noise_amplitude():
    r = rng(2)
    base = r.uniform(0.2, 0.8, (32, 32))
    noise = r.normal(0, 1, (32, 32))
    values = [psnr(base + amp * noise, base) for amp in (0.01, 0.02, 0.05, 0.1)]
    assert all(b < a for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# ssim_global


def test_ssim_global_self_is_one():
    x = rng(3).uniform(0, 1, (32, 32))
    assert ssim_global(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_global_one_iff_identical():
    # a central pixel sits under real window weight (a corner pixel is
    # all but erased by the Gaussian mask)
    r = rng(4)
    x = r.uniform(0, 1, (32, 32))
    y = x.copy()
    y[16, 16] += 0.2
    assert ssim_global(x, y) < 1.0 - 1e-9


def test_ssim_global_in_unit_interval():
    r = rng(5)
    for _ in range(5):
        x = r.uniform(0, 1, (16, 16))
        y = r.uniform(0, 1, (16, 16))
        v = ssim_global(x, y)
        assert -1.0 <= v <= 1.0


def test_ssim_global_independent_noise_is_near_zero():
    # frozen Monte-Carlo bound: mean-zero independent images decorrelate
    r = rng(6)
    x = r.normal(0, 1, (128, 128))
    y = r.normal(0, 1, (128, 128))
    assert abs(ssim_global(x, y)) < 0.2


def test_ssim_global_matches_per_window_oracle():
    from tests.test_losses import ssim_components_oracle

    r = rng(7)
    x = r.uniform(0, 1, (32, 32))
    y = r.uniform(0, 1, (32, 32))
    p = MsSsimParams()
    lo, co, so = ssim_components_oracle(x, y, p)
    assert ssim_global(x, y, p) == pytest.approx(float((lo * co * so).mean()), abs=1e-10)


def test_ssim_global_multichannel_mean():
    r = rng(8)
    x = r.uniform(0, 1, (3, 16, 16))
    y = r.uniform(0, 1, (3, 16, 16))
    per = [ssim_global(x[c], y[c]) for c in range(3)]
    assert ssim_global(x, y) == pytest.approx(float(np.mean(per)), abs=1e-12)


# ---------------------------------------------------------------------------
# morph_quality


def test_morph_quality_identical_everything():
    x = rng(9).uniform(0, 1, (16, 16))
    rec = morph_quality("m1", x, x, x)
    assert math.isinf(rec.psnr_avg)
    assert rec.psnr_text() == "INF"
    assert rec.ssim_avg == pytest.approx(1.0, abs=1e-12)


def test_morph_quality_averages_parents():
    r = rng(10)
    im = r.uniform(0, 1, (16, 16))
    p1 = r.uniform(0, 1, (16, 16))
    p2 = r.uniform(0, 1, (16, 16))
    rec = morph_quality("m", im, p1, p2)
    assert rec.psnr_avg == pytest.approx((psnr(im, p1) + psnr(im, p2)) / 2, abs=1e-12)
    assert rec.ssim_avg == pytest.approx((ssim_global(im, p1) + ssim_global(im, p2)) / 2, abs=1e-12)


def test_morph_quality_symmetric_in_parents():
    r = rng(11)
    im = r.uniform(0, 1, (16, 16))
    p1 = r.uniform(0, 1, (16, 16))
    p2 = r.uniform(0, 1, (16, 16))
    a = morph_quality("m", im, p1, p2)
    b = morph_quality("m", im, p2, p1)
    assert a.psnr_avg == b.psnr_avg
    assert a.ssim_avg == b.ssim_avg


# ---------------------------------------------------------------------------
# confidence intervals


def test_ci_all_equal_values():
    s = summarize_ci([3.5, 3.5, 3.5, 3.5])
    assert s.mean == 3.5
    assert s.halfwidth == 0.0
    assert s.n == 4


def test_ci_two_point_closed_form():
    s = summarize_ci([0.0, 2.0])
    assert s.mean == 1.0
    # sd = sqrt(2), halfwidth = 1.96*sqrt(2)/sqrt(2) = 1.96
    assert s.halfwidth == pytest.approx(1.96, abs=1e-12)


def test_ci_monte_carlo_standard_normal():
    values = rng(12).normal(0, 1, 10_000)
    s = summarize_ci(values)
    assert s.halfwidth == pytest.approx(1.96 / 100.0, rel=0.10)


def test_ci_requires_two_finite_values():
    with pytest.raises(ValueError):
        summarize_ci([1.0])
    with pytest.raises(ValueError):
        summarize_ci([1.0, float("inf")])


def test_ci_summary_validates_n():
    with pytest.raises(ValueError):
        CiSummary(mean=0.0, halfwidth=0.1, n=1)
