import math
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import chi2, kstest

from adaptmct.gmct import (
    CombinationMethod,
    DegenerateVariance,
    combine_across,
    contrast_t_stats,
    contrast_z_stats,
    run_gmct_stage,
    simulate_null_psi,
    stage_p_value,
)
from adaptmct.models import StageSummary


def test_t_stats_match_direct_formula(stage1, contrasts1):
    """Oracle: direct evaluation of the contrast-t formula on the
    published summary statistics (means, pooled sd 1.58, n = 24)."""
    stats = contrast_t_stats(stage1, contrasts1)
    s = math.sqrt(stage1.pooled_variance())
    direct = np.array([
        (c @ stage1.means) / (s * math.sqrt(np.sum(c * c / 24.0)))
        for c in contrasts1.coeffs])
    assert_allclose(stats, direct, atol=1e-12)
    # quadratic-model statistic, frozen from the direct evaluation
    assert stats[3] == pytest.approx(2.9253, abs=2e-3)
    assert stats[3] == pytest.approx(2.94, abs=0.05)


def test_t_stats_scale_invariance(stage1, contrasts1):
    """Rescaling contrast coefficients leaves the statistic unchanged."""
    s = math.sqrt(stage1.pooled_variance())
    c = contrasts1.coeffs[0]
    t_unit = (c @ stage1.means) / (s * math.sqrt(np.sum(c * c / 24.0)))
    c2 = 2.0 * c
    t_doubled = (c2 @ stage1.means) / (s * math.sqrt(np.sum(c2 * c2 / 24.0)))
    assert t_doubled == pytest.approx(t_unit, abs=1e-14)
    assert contrast_t_stats(stage1, contrasts1)[0] == pytest.approx(t_unit, abs=1e-12)


def test_equal_means_annihilate(contrasts1):
    flat = StageSummary(np.array([0.0, 0.05, 0.20, 0.60, 1.00]), np.full(5, 24),
                        np.full(5, 0.7), 115 * 1.5 ** 2)
    assert_allclose(contrast_t_stats(flat, contrasts1), 0.0, atol=1e-12)
    assert_allclose(contrast_z_stats(flat, contrasts1, 1.478), 0.0, atol=1e-12)


def test_zero_variance_raises(contrasts1):
    degenerate = StageSummary(np.array([0.0, 0.05, 0.20, 0.60, 1.00]),
                              np.full(5, 24), np.linspace(0, 1, 5), 0.0)
    with pytest.raises(DegenerateVariance):
        contrast_t_stats(degenerate, contrasts1)


def test_stage1_pvalues_match_published(stage1, contrasts1):
    stats = contrast_t_stats(stage1, contrasts1)
    df = float(stage1.df)
    p_t = stage_p_value(stats, contrasts1.corr, df, "tippett", seed=5)
    p_f = stage_p_value(stats, contrasts1.corr, df, "fisher", seed=5)
    p_n = stage_p_value(stats, contrasts1.corr, df, "inverse-normal", seed=5)
    assert p_t == pytest.approx(0.005, abs=0.01)
    assert p_f == pytest.approx(0.047, abs=0.01)
    assert p_n == pytest.approx(0.06, abs=0.01)


def test_stage2_pvalues_match_published(stage2, interim):
    stats = contrast_t_stats(stage2, interim.stage2_contrasts)
    corr = interim.stage2_contrasts.corr
    df = float(stage2.df)
    assert stage_p_value(stats, corr, df, "tippett", seed=6) == pytest.approx(0.005, abs=0.01)
    assert stage_p_value(stats, corr, df, "fisher", seed=6) == pytest.approx(0.008, abs=0.01)
    assert stage_p_value(stats, corr, df, "inverse-normal", seed=6) == pytest.approx(0.008, abs=0.01)


def test_single_contrast_p_is_raw_p():
    corr = np.eye(1)
    for df in (25.0, math.inf):
        for t in (0.4, 1.7):
            raw = stage_p_value(np.array([t]), corr, df, "tippett", seed=4)
            from adaptmct.gmct import raw_upper_p

            assert raw == pytest.approx(raw_upper_p([t], df)[0], abs=1e-6)
            for meth in ("fisher", "inverse-normal"):
                p = stage_p_value(np.array([t]), corr, df, meth, seed=4, draws=100_000)
                assert p == pytest.approx(raw, abs=0.006)


def test_combination_statistics_published_rows():
    # combining the published stage p-values reproduces the published
    # statistics and overall p-values
    psi, p = combine_across(0.005, 0.005, "fisher")
    assert psi == pytest.approx(21.23, abs=0.3)
    assert p == pytest.approx(0.0003, abs=0.0005)
    psi, p = combine_across(0.005, 0.005, "inverse-normal")
    assert psi == pytest.approx(5.16, abs=0.05)
    assert p == pytest.approx(0.0001, abs=0.0005)
    psi, p = combine_across(0.047, 0.008, "fisher")
    assert psi == pytest.approx(15.78, abs=0.3)
    assert p == pytest.approx(0.003, abs=0.0005)


def test_combination_symmetry_point():
    psi, p = combine_across(0.5, 0.5, "inverse-normal")
    assert psi == pytest.approx(0.0, abs=1e-12)
    assert p == pytest.approx(0.5, abs=1e-12)


def test_combination_floors_zero_pvalues():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        psi, p = combine_across(0.0, 0.01, "fisher")
    assert any("floored" in str(w.message) for w in caught)
    assert math.isfinite(psi) and 0.0 <= p <= 1.0


def test_tippett_not_allowed_across_stages():
    with pytest.raises(ValueError):
        combine_across(0.2, 0.3, "tippett")


def test_fisher_null_is_chi2_four_under_independence():
    rng = np.random.default_rng(14)
    u = rng.uniform(size=(100_000, 2))
    psi = -2.0 * np.log(u).sum(axis=1)
    assert kstest(psi, chi2(4).cdf).pvalue > 0.01


def test_simulate_null_psi_deterministic(contrasts1):
    a = simulate_null_psi(contrasts1.corr, 115.0, "fisher", 5000, seed=10)
    b = simulate_null_psi(contrasts1.corr, 115.0, "fisher", 5000, seed=10)
    assert_allclose(a, b)


def test_run_gmct_stage_known_vs_unknown(stage1, contrasts1):
    known = run_gmct_stage(stage1, contrasts1, "tippett", seed=1, sigma=1.478)
    unknown = run_gmct_stage(stage1, contrasts1, "tippett", seed=1)
    assert math.isinf(known.df)
    assert unknown.df == stage1.df
    # same numerators; different denominators (sigma vs pooled sd)
    ratio = known.t_stats / unknown.t_stats
    assert_allclose(ratio, ratio[0] * np.ones(5), atol=1e-10)
