import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from adaptmct.models import (
    ConvergenceFailure,
    DegenerateDesign,
    DoseResponseModel,
    ModelFamily,
    PARAM_COUNT,
    StageSummary,
    UnderdeterminedFit,
    default_candidates,
    evaluate,
    fit,
    isotonic_means,
    true_model,
)
from adaptmct.models import _wls

DOSES = np.array([0.0, 0.05, 0.20, 0.60, 1.00])


# ------------------------------------------------------------------ #
# catalog and evaluation
# ------------------------------------------------------------------ #

def test_param_counts_are_enforced():
    for fam, arity in PARAM_COUNT.items():
        with pytest.raises(ValueError):
            DoseResponseModel(fam, tuple(0.5 for _ in range(arity + 1)))


@pytest.mark.parametrize("fam,theta", [
    (ModelFamily.EMAX, (0.2, 0.7, 0.0)),           # zero ed50
    (ModelFamily.LOGISTIC, (0.2, 0.7, 0.4, 0.0)),  # zero slope width
    (ModelFamily.LOGISTIC, (0.2, 0.7, -0.4, 0.1)),
    (ModelFamily.EXPONENTIAL, (0.2, 0.1, -1.0)),
])
def test_invalid_parameters_rejected(fam, theta):
    with pytest.raises(ValueError):
        DoseResponseModel(fam, theta)


def test_evaluate_matches_hand_coded_closed_forms():
    """Every family against an independently coded formula at random doses."""
    rng = np.random.default_rng(42)
    d = rng.uniform(0.0, 1.0, 100)
    cases = {
        ModelFamily.EMAX: ((0.2, 0.6, 0.1), lambda x: 0.2 + 0.6 * x / (0.1 + x)),
        ModelFamily.LINEAR_LOG: ((0.2, 0.33), lambda x: 0.2 + 0.33 * np.log(5 * x + 1)),
        ModelFamily.LINEAR: ((0.2, 0.6), lambda x: 0.2 + 0.6 * x),
        ModelFamily.QUADRATIC: ((0.2, 2.4, -2.4), lambda x: 0.2 + 2.4 * x - 2.4 * x ** 2),
        ModelFamily.LOGISTIC: ((0.193, 0.607, 0.4, 0.09),
                               lambda x: 0.193 + 0.607 / (1 + np.exp((0.4 - x) / 0.09))),
        ModelFamily.EXPONENTIAL: ((0.19924, 0.00076, 0.15),
                                  lambda x: 0.19924 + 0.00076 * np.exp(x / 0.15)),
        ModelFamily.DOUBLE_LOGISTIC: (
            (0.198, 0.61, 18.0, 0.3, 0.499, 0.309, 18.0, 0.7),
            lambda x: np.where(x <= 0.5,
                               0.198 + 0.61 / (1 + np.exp(18 * (0.3 - x))),
                               0.499 + 0.309 / (1 + np.exp(18 * (x - 0.7))))),
        ModelFamily.STEP: ((0.2, 0.6, 0.6), lambda x: 0.2 + 0.6 * (x >= 0.6)),
        ModelFamily.TRUNCATED_LOGISTIC: ((0.2, 0.682, 10.0, 0.8),
                                         lambda x: 0.2 + 0.682 / (1 + np.exp(10 * (0.8 - x)))),
    }
    for fam, (theta, ref) in cases.items():
        model = DoseResponseModel(fam, theta)
        assert_allclose(evaluate(model, d), ref(d), rtol=1e-12)


def test_emax2_profile_matches_published_rounding():
    mu = evaluate(true_model("emax2"), DOSES)
    assert [round(v, 2) for v in mu] == [0.20, 0.40, 0.60, 0.71, 0.75]


def test_linear_intercept_at_placebo():
    assert evaluate(DoseResponseModel(ModelFamily.LINEAR, (0.2, 0.6)), 0.0) == 0.2


def test_step_boundary_is_inclusive():
    assert evaluate(true_model("step"), 0.6) == pytest.approx(0.8)
    assert evaluate(true_model("step"), 0.6 - 1e-12) == pytest.approx(0.2)


def test_double_logistic_owns_left_boundary_and_is_near_continuous():
    m = true_model("double-logistic")
    left = 0.198 + 0.61 / (1 + math.exp(18 * (0.3 - 0.5)))
    assert evaluate(m, 0.5) == pytest.approx(left)
    assert abs(evaluate(m, 0.5 + 1e-9) - evaluate(m, 0.5)) < 0.01


# ------------------------------------------------------------------ #
# fitting
# ------------------------------------------------------------------ #

def _noiseless_summary(model, n_per=24):
    return StageSummary(DOSES, np.full(5, n_per), evaluate(model, DOSES), 0.0)


def test_fit_linear_interpolates_noiseless_data():
    data = StageSummary(DOSES, np.full(5, 10), 0.2 + 0.6 * DOSES, 0.0)
    res = fit(ModelFamily.LINEAR, data)
    assert_allclose(res.theta, (0.2, 0.6), atol=1e-10)


@pytest.mark.parametrize("fam,theta", [
    (ModelFamily.EMAX, (0.2, 0.7, 0.2)),
    (ModelFamily.LOGISTIC, (0.193, 0.607, 0.4, 0.09)),
    (ModelFamily.EXPONENTIAL, (0.19924, 0.00076, 0.15)),
    (ModelFamily.TRUNCATED_LOGISTIC, (0.2, 0.682, 10.0, 0.8)),
    (ModelFamily.LINEAR_LOG, (0.2, 0.335)),
    (ModelFamily.QUADRATIC, (0.2, 2.049, -1.749)),
])
def test_fit_recovers_interior_parameters_from_noiseless_data(fam, theta):
    res = fit(fam, _noiseless_summary(DoseResponseModel(fam, theta)))
    assert not isinstance(res, ConvergenceFailure)
    rel = np.max(np.abs((np.array(res.theta) - np.array(theta)) / np.array(theta)))
    assert rel < 1e-6


def test_fit_via_group_means_equals_subject_level():
    rng = np.random.default_rng(3)
    subjects_d = np.repeat(DOSES, 7)
    subjects_y = 0.2 + 0.6 * subjects_d + rng.normal(0, 0.4, subjects_d.size)
    full = StageSummary.from_subjects(subjects_d, subjects_y)
    res_full = fit(ModelFamily.QUADRATIC, full)
    # identical sufficient statistics -> identical fit
    grouped = StageSummary(full.doses, full.n, full.means, full.ss_within)
    res_grouped = fit(ModelFamily.QUADRATIC, grouped)
    assert_allclose(res_full.theta, res_grouped.theta, atol=1e-8)
    res_emax = fit(ModelFamily.EMAX, full)
    res_emax2 = fit(ModelFamily.EMAX, grouped)
    assert_allclose(res_emax.theta, res_emax2.theta, atol=1e-8)


def test_fit_logistic_fails_on_nonmonotone_example(stage1):
    res = fit(ModelFamily.LOGISTIC, stage1)
    assert isinstance(res, ConvergenceFailure)


def test_fit_emax_finds_negative_ed50_optimum(stage1):
    # The least-squares surface for this non-monotone dataset has its
    # optimum with the hyperbola pole just above the top retained dose.
    res = fit(ModelFamily.EMAX, stage1)
    assert not isinstance(res, ConvergenceFailure)
    assert -0.7 < res.theta[2] < -0.6


def test_fit_quadratic_example_then_contrast(stage1):
    from adaptmct.contrasts import optimal_contrast

    res = fit(ModelFamily.QUADRATIC, stage1)
    mu2 = evaluate(res, np.array([0.0, 0.2, 0.6]))
    c = optimal_contrast(mu2, np.full(3, 40.0))
    assert_allclose(c, [-0.766, 0.137, 0.629], atol=0.0015)


def test_fit_underdetermined_design():
    data = StageSummary(np.array([0.0, 1.0]), np.array([5, 5]),
                        np.array([0.1, 0.9]), 1.0)
    with pytest.raises(UnderdeterminedFit):
        fit(ModelFamily.QUADRATIC, data)
    with pytest.raises(UnderdeterminedFit):
        fit(ModelFamily.DOUBLE_LOGISTIC, StageSummary(
            DOSES, np.full(5, 4), np.linspace(0, 1, 5), 1.0))


def test_wls_rejects_singular_design():
    with pytest.raises(DegenerateDesign):
        _wls(np.column_stack([np.ones(4), np.ones(4)]),
             np.arange(4.0), np.ones(4))


def test_default_candidates_shapes():
    cands = default_candidates()
    assert [c.family for c in cands] == [
        ModelFamily.EMAX, ModelFamily.LINEAR_LOG, ModelFamily.LINEAR,
        ModelFamily.QUADRATIC, ModelFamily.LOGISTIC]


# ------------------------------------------------------------------ #
# isotonic regression
# ------------------------------------------------------------------ #

def _brute_force_isotonic(y, w):
    """Exhaustive search over all contiguous block partitions (k <= 6)."""
    k = len(y)
    best, best_sse = None, np.inf
    for mask in range(1 << (k - 1)):
        cuts = [0] + [i + 1 for i in range(k - 1) if mask & (1 << i)] + [k]
        fit_vals = np.empty(k)
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            fit_vals[lo:hi] = np.average(y[lo:hi], weights=w[lo:hi])
        if np.any(np.diff(fit_vals) < -1e-12):
            continue
        sse = float(np.sum(w * (y - fit_vals) ** 2))
        if sse < best_sse - 1e-12:
            best, best_sse = fit_vals, sse
    return best


def test_isotonic_identity_when_sorted():
    assert_allclose(isotonic_means([0.52, 1.09, 1.70], [1, 1, 1]),
                    [0.52, 1.09, 1.70])


def test_isotonic_pools_single_violation():
    assert_allclose(isotonic_means([1.0, 0.0], [1, 1]), [0.5, 0.5])


def test_isotonic_matches_brute_force_partition_search():
    rng = np.random.default_rng(11)
    for _ in range(120):
        k = int(rng.integers(2, 7))
        y = rng.normal(size=k)
        w = rng.integers(1, 9, size=k).astype(float)
        assert_allclose(isotonic_means(y, w), _brute_force_isotonic(y, w),
                        atol=1e-10)


def test_isotonic_properties():
    rng = np.random.default_rng(5)
    for _ in range(50):
        y = rng.normal(size=6)
        w = rng.integers(1, 20, size=6).astype(float)
        out = isotonic_means(y, w)
        assert np.all(np.diff(out) >= -1e-12)
        assert np.average(out, weights=w) == pytest.approx(np.average(y, weights=w))
        assert_allclose(isotonic_means(out, w), out, atol=1e-12)


def test_example_isotonic_restriction_gives_published_contrast(stage1):
    from adaptmct.contrasts import optimal_contrast

    iso = isotonic_means(stage1.means, stage1.n)
    restricted = iso[[0, 2, 3]]
    c = optimal_contrast(restricted, np.full(3, 40.0))
    assert_allclose(c, [-0.816, 0.408, 0.408], atol=5e-4)
