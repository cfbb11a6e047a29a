import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import ndtr, ndtri, stdtr
from scipy.stats import multivariate_normal

from adaptmct.mvprob import (
    EquiProbQuery,
    NumericalDomainError,
    bvn_cdf,
    conditional_t_orthant,
    gaussian_box_prob,
    mv_cdf_upper_tail,
    mv_equicoordinate_quantile,
    t_box_prob,
)


def _exchangeable(m, rho):
    return np.full((m, m), rho) + (1 - rho) * np.eye(m)


def test_bvn_cdf_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(300):
        rho = rng.uniform(-0.98, 0.98)
        h, k = rng.uniform(-3.5, 3.5, 2)
        ref = multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]]).cdf([h, k])
        assert bvn_cdf(h, k, rho) == pytest.approx(ref, abs=5e-14)
    # zero-coordinate branches
    for rho in (-0.9, -0.3, 0.4, 0.977):
        for k in (-1.3, 0.0, 2.2):
            ref = multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]]).cdf([0.0, k])
            assert bvn_cdf(0.0, k, rho) == pytest.approx(ref, abs=1e-12)


def test_univariate_paths_are_exact():
    grid = np.linspace(-4, 4, 41)
    for b in grid:
        p, se = gaussian_box_prob(np.eye(1), np.array([b]), seed=1)
        assert p == pytest.approx(ndtr(b), abs=1e-15)
        pt, _ = t_box_prob(np.eye(1), np.array([b]), 7, seed=1)
        assert pt == pytest.approx(stdtr(7, b), abs=1e-15)


def test_upper_tail_univariate_example():
    q = EquiProbQuery(corr=np.eye(1), shift=0.0, df=math.inf, bound=1.645)
    assert mv_cdf_upper_tail(q, seed=1) == pytest.approx(0.05, abs=2e-4)


def test_tail_against_plain_monte_carlo_m3():
    corr = _exchangeable(3, 0.5)
    q = EquiProbQuery(corr=corr, shift=0.0, df=math.inf, bound=2.0)
    tail = mv_cdf_upper_tail(q, seed=5)
    rng = np.random.default_rng(99)
    L = np.linalg.cholesky(corr)
    hits = 0
    n = 10_000_000
    for _ in range(10):
        z = rng.standard_normal((n // 10, 3)) @ L.T
        hits += int((z.max(axis=1) >= 2.0).sum())
    mc = hits / n
    se = math.sqrt(mc * (1 - mc) / n)
    assert abs(tail - mc) < 3 * se + 2e-4


def test_equicoordinate_quantile_known_values(contrasts1):
    u = mv_equicoordinate_quantile(contrasts1.corr, math.inf, 0.95, seed=3)
    assert u == pytest.approx(1.968, abs=0.005)
    # univariate shortcut
    assert mv_equicoordinate_quantile(np.eye(1), math.inf, 0.95, seed=3) == \
        pytest.approx(1.6449, abs=1e-3)
    # bivariate t at high correlation
    corr2 = np.array([[1.0, 0.977], [0.977, 1.0]])
    c = mv_equicoordinate_quantile(corr2, 230, 0.95, seed=3)
    assert c == pytest.approx(1.732, abs=0.005)


def test_quantile_cdf_round_trip():
    rng = np.random.default_rng(8)
    for m, df in ((3, math.inf), (4, 60.0), (2, 12.0)):
        a = rng.normal(size=(m, m + 1))
        cov = a @ a.T
        d = np.sqrt(np.diag(cov))
        corr = cov / np.outer(d, d)
        for level in (0.9, 0.95):
            b = mv_equicoordinate_quantile(corr, df, level, seed=17)
            p, _ = t_box_prob(corr, np.full(m, b), df, seed=17)
            assert p == pytest.approx(level, abs=1e-3)


def test_monotone_in_bound():
    corr = _exchangeable(4, 0.6)
    tails = [mv_cdf_upper_tail(EquiProbQuery(corr, 0.3, math.inf, b), seed=9)
             for b in np.linspace(-1, 4, 11)]
    assert np.all(np.diff(tails) <= 1e-4)
    quants = [mv_equicoordinate_quantile(corr, math.inf, lv, seed=9)
              for lv in (0.8, 0.9, 0.95, 0.99)]
    assert np.all(np.diff(quants) > 0)


def test_shift_and_scale_semantics():
    # P(X <= b) with X ~ N(mu, s * corr) == P(Z <= (b - mu)/sqrt(s))
    corr = _exchangeable(3, 0.4)
    q = EquiProbQuery(corr, shift=np.array([0.5, -0.2, 0.1]), df=math.inf,
                      bound=1.1, scale=0.5)
    direct = mv_cdf_upper_tail(q, seed=21)
    upper = (1.1 - np.array([0.5, -0.2, 0.1])) / math.sqrt(0.5)
    ref, _ = gaussian_box_prob(corr, upper, seed=21)
    assert direct == pytest.approx(1 - ref, abs=5e-4)


def test_batch_kernel_consistent_with_single():
    from adaptmct.mvprob import _chol_psd, _genz_rqmc_batch

    corr = _exchangeable(4, 0.3)
    L = _chol_psd(corr)
    uppers = np.array([[0.5, 1.0, -0.2, 2.0], [1.5, 1.5, 1.5, 1.5]])
    batch = _genz_rqmc_batch(L, uppers, seed=4, log2_n=13, shifts=8)
    for row, est in zip(uppers, batch):
        single, _ = gaussian_box_prob(corr, row, seed=11, target_se=5e-5)
        assert est == pytest.approx(single, abs=3e-3)


def test_conditional_orthant_reduces_to_central_t():
    """q = 0 and zero shift collapse to the central multivariate t box."""
    for m, corr in ((2, _exchangeable(2, 0.7)), (4, _exchangeable(4, 0.5))):
        nu = 30
        bound = 1.9
        orthant = conditional_t_orthant(corr, np.zeros(m), 0.0, nu, nu, bound, seed=2)
        box, _ = t_box_prob(corr, np.full(m, bound), nu, seed=2, target_se=5e-5)
        assert orthant == pytest.approx(1 - box, abs=2e-3)


def test_conditional_orthant_edges():
    corr = _exchangeable(2, 0.5)
    assert conditional_t_orthant(corr, np.zeros(2), 1.0, 10, 10, math.inf) == 0.0
    with pytest.raises(ValueError):
        conditional_t_orthant(corr, np.array([np.inf, 0.0]), 1.0, 10, 10, 1.0)
    with pytest.raises(ValueError):
        conditional_t_orthant(corr, np.zeros(2), -0.5, 10, 10, 1.0)


def test_conditional_orthant_monotone_in_bound():
    corr = np.array([[1.0, 0.977], [0.977, 1.0]])
    b = np.array([1.67, 1.22])
    vals = [conditional_t_orthant(corr, b, 1.14, 115, 115, c) for c in
            np.linspace(0.5, 3.0, 8)]
    assert np.all(np.diff(vals) < 0)


def test_non_psd_matrix_raises():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NumericalDomainError):
        gaussian_box_prob(bad, np.array([0.0, 0.0]), seed=1)


def test_singular_correlation_is_repaired():
    ones = np.ones((3, 3))
    p, _ = gaussian_box_prob(ones, np.array([1.0, 1.0, 1.0]), seed=1)
    assert p == pytest.approx(ndtr(1.0), abs=2e-3)


def test_determinism_under_fixed_seed():
    corr = _exchangeable(5, 0.6)
    a, _ = gaussian_box_prob(corr, np.linspace(0, 2, 5), seed=77)
    b, _ = gaussian_box_prob(corr, np.linspace(0, 2, 5), seed=77)
    assert a == b
