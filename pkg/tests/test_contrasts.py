import numpy as np
import pytest
from numpy.testing import assert_allclose

from adaptmct.contrasts import (
    DegenerateContrast,
    build_contrast_set,
    contrasts_for_models,
    correlation_matrix,
    optimal_contrast,
)
from adaptmct.models import DoseResponseModel, ModelFamily, evaluate

DOSES = np.array([0.0, 0.05, 0.20, 0.60, 1.00])
N_EQ = np.full(5, 24.0)


def test_emax_candidate_contrast_matches_published_values():
    mu = evaluate(DoseResponseModel(ModelFamily.EMAX, (0.2, 0.7, 0.2)), DOSES)
    c = optimal_contrast(mu, N_EQ)
    assert [round(v, 2) for v in c] == [-0.64, -0.36, 0.06, 0.41, 0.53]


def test_linear_log_candidate_at_reduced_design():
    mu = evaluate(DoseResponseModel(ModelFamily.LINEAR_LOG, (0.2, 0.6 / np.log(6))),
                  np.array([0.0, 0.2, 0.6]))
    c = optimal_contrast(mu, np.full(3, 40.0))
    assert_allclose(c, [-np.sqrt(0.5), 0.0, np.sqrt(0.5)], atol=5e-4)


def test_two_dose_contrast_is_unique():
    c = optimal_contrast([1.0, 3.7], np.array([12.0, 12.0]))
    assert_allclose(c, [-1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-12)


def test_affine_invariance_and_sign_convention():
    rng = np.random.default_rng(2)
    for _ in range(40):
        mu = rng.normal(size=5)
        if np.ptp(mu) < 1e-6:
            continue
        base = optimal_contrast(mu, N_EQ)
        up = optimal_contrast(1.3 + 2.1 * mu, N_EQ)
        down = optimal_contrast(0.4 - 5.0 * mu, N_EQ)
        assert_allclose(up, base, atol=1e-12)
        # a negative rescaling flips the generating profile, so the
        # uphill convention flips the contrast
        assert_allclose(down, -base, atol=1e-12)


def test_constant_profile_raises():
    with pytest.raises(DegenerateContrast):
        optimal_contrast(np.full(5, 0.3), N_EQ)


def test_contrast_maximizes_noncentrality():
    rng = np.random.default_rng(7)
    mu = evaluate(DoseResponseModel(ModelFamily.EMAX, (0.2, 0.7, 0.2)), DOSES)
    c = optimal_contrast(mu, N_EQ)

    def noncentrality(v):
        return (v @ mu) / np.sqrt(np.sum(v * v / N_EQ))

    lam = noncentrality(c)
    for _ in range(200):
        z = rng.normal(size=5)
        z -= z.mean()
        v = c + 0.3 * z / np.linalg.norm(z)
        v -= v.mean()
        assert noncentrality(v / np.linalg.norm(v)) <= lam + 1e-12


def test_correlation_matrix_published_entries(contrasts1):
    corr = contrasts1.corr
    assert corr[0, 1] == pytest.approx(0.977, abs=5e-4)
    assert corr[2, 3] == pytest.approx(0.602, abs=5e-4)
    assert_allclose(np.diag(corr), 1.0, atol=1e-12)
    assert np.all(np.abs(corr) <= 1 + 1e-12)


def test_single_contrast_correlation_is_identity():
    c = optimal_contrast([0.0, 1.0, 2.0], np.full(3, 8.0))
    assert_allclose(correlation_matrix(c, np.full(3, 8.0)), [[1.0]])


def test_two_model_subset_correlation(candidates):
    cs = contrasts_for_models(candidates[:2], DOSES, np.full(5, 24))
    assert_allclose(cs.corr, [[1.0, 0.977], [0.977, 1.0]], atol=5e-4)


def test_correlation_matches_monte_carlo_oracle(contrasts1):
    """R equals the sample correlation of simulated contrast statistics."""
    rng = np.random.default_rng(123)
    n = 24
    draws = 1_000_000
    means = rng.standard_normal((draws, 5)) / np.sqrt(n)
    stats = means @ contrasts1.coeffs.T  # common variance cancels
    emp = np.corrcoef(stats, rowvar=False)
    assert np.max(np.abs(emp - contrasts1.corr)) < 0.005


def test_unequal_allocation_enters_weights():
    n = np.array([40.0, 10.0, 10.0])
    mu = np.array([0.0, 0.5, 1.0])
    c = optimal_contrast(mu, n)
    # heavier placebo group pulls the weighted mean down, and the
    # coefficients scale with n_i
    assert c[0] == pytest.approx(-(c[1] + c[2]), abs=1e-12)
    expected = n * (mu - np.average(mu, weights=n))
    assert_allclose(c, expected / np.linalg.norm(expected), atol=1e-12)


def test_build_contrast_set_validates_rows():
    with pytest.raises(ValueError):
        build_contrast_set(np.array([[0.5, 0.5, -0.5]]), np.array([0.0, 0.5, 1.0]),
                           np.array([4, 4, 4]))
