import numpy as np
import pytest
from numpy.testing import assert_allclose

from adaptmct.adapt import (
    SE_RULE,
    AdaptationConfig,
    ModelPolicy,
    Provenance,
    adapt_doses,
    adapt_models,
    run_interim,
    stage2_group_sizes,
)
from adaptmct.contrasts import contrasts_for_models
from adaptmct.models import StageSummary, default_candidates, evaluate

DOSES = np.array([0.0, 0.05, 0.20, 0.60, 1.00])


def _summary(means, sd=1.58, n=24):
    means = np.asarray(means, dtype=float)
    k = means.size
    return StageSummary(DOSES[:k], np.full(k, n), means, (k * n - k) * sd ** 2)


def test_example_dose_adaptation(stage1):
    retained = adapt_doses(stage1, AdaptationConfig(0.0))
    assert_allclose(retained, [0.0, 0.20, 0.60])


def test_strictly_increasing_means_keep_everything():
    retained = adapt_doses(_summary([0.1, 0.2, 0.3, 0.4, 0.5]), AdaptationConfig(0.0))
    assert_allclose(retained, DOSES)


def test_all_actives_below_placebo_is_futility():
    assert adapt_doses(_summary([0.5, 0.1, 0.2, 0.3, 0.4]), AdaptationConfig(0.0)) is None


def test_boundary_conventions(candidates):
    # exactly tied means: every active survives the placebo screen
    # (>= -delta) but none survives the strict adjacent walk (> -delta)
    retained = adapt_doses(_summary([0.5, 0.5, 0.5, 0.5, 0.5]), AdaptationConfig(0.0))
    assert_allclose(retained, [0.0])
    # run_interim flags the placebo-only outcome loudly
    from adaptmct.models import DegenerateDesign

    with pytest.raises(DegenerateDesign):
        run_interim(_summary([0.5, 0.5, 0.5, 0.5, 0.5]), candidates, 120,
                    AdaptationConfig(0.0))


def test_adjacent_walk_compares_to_last_retained():
    # second dose beats placebo, third drops below the *retained* second
    retained = adapt_doses(_summary([0.0, 1.0, 0.5, 1.2, 1.3]), AdaptationConfig(0.0))
    assert_allclose(retained, [0.0, 0.05, 0.60, 1.00])


def test_monotone_in_delta():
    rng = np.random.default_rng(21)
    deltas = [0.0, 0.1, 0.3, 0.8, 2.0]
    for _ in range(200):
        means = rng.normal(0.5, 0.6, size=5)
        kept = []
        for d in deltas:
            r = adapt_doses(_summary(means), AdaptationConfig(d))
            kept.append(set() if r is None else set(np.round(r, 10)))
        for small, large in zip(kept[:-1], kept[1:]):
            assert small <= large


def test_se_rule_threshold():
    # one-standard-error slack keeps a dose that delta=0 drops
    means = [0.5, 0.45, 0.7, 0.9, 1.0]
    strict = adapt_doses(_summary(means), AdaptationConfig(0.0))
    lax = adapt_doses(_summary(means), AdaptationConfig(SE_RULE))
    assert 0.05 not in strict
    assert 0.05 in lax


def test_stage2_group_sizes_remainder_to_lowest():
    assert_allclose(stage2_group_sizes(120, 3), [40, 40, 40])
    assert_allclose(stage2_group_sizes(121, 3), [41, 40, 40])
    assert_allclose(stage2_group_sizes(11, 4), [3, 3, 3, 2])
    with pytest.raises(ValueError):
        stage2_group_sizes(2, 3)


def test_example_model_adaptation_published_contrasts(stage1, candidates, interim):
    assert not interim.futility_stop
    assert [p.value for p in interim.provenance] == [
        "refit", "refit", "refit", "refit", "isotonic-fallback"]
    c = interim.stage2_contrasts.coeffs
    assert_allclose(c[0], [-0.433, -0.383, 0.816], atol=0.0015)   # emax refit
    assert_allclose(c[1], [-0.707, 0.000, 0.707], atol=0.0015)    # linear-log
    assert_allclose(c[2], [-0.617, -0.154, 0.772], atol=0.0015)   # linear
    assert_allclose(c[3], [-0.766, 0.137, 0.629], atol=0.0015)    # quadratic
    assert_allclose(c[4], [-0.816, 0.408, 0.408], atol=0.0015)    # isotonic


def test_refit_is_fixed_point_on_noiseless_candidate_data(candidates):
    emax = candidates[0]
    data = StageSummary(DOSES, np.full(5, 24), evaluate(emax, DOSES),
                        115 * 0.8 ** 2)
    out = run_interim(data, candidates, 120, AdaptationConfig(0.0))
    assert_allclose(out.retained_doses, DOSES)
    # the refit emax contrast equals the de novo optimal contrast
    fresh = contrasts_for_models([emax], DOSES, np.full(5, 24))
    assert_allclose(out.stage2_contrasts.coeffs[0], fresh.coeffs[0], atol=1e-6)


def test_negative_slope_suppresses_model_adaptation(candidates):
    # positive jump at the second dose keeps the trial going, but the
    # overall linear trend is negative
    data = _summary([0.5, 0.9, 0.2, 0.1, 0.05])
    out = run_interim(data, candidates, 120, AdaptationConfig(0.0))
    assert not out.futility_stop
    assert all(p is Provenance.NEGATIVE_SLOPE_NO_ADAPT for p in out.provenance)
    # contrasts come from the original candidates restricted to the
    # retained doses
    expected = contrasts_for_models(candidates, out.retained_doses,
                                    out.stage2_contrasts.n)
    assert_allclose(out.stage2_contrasts.coeffs, expected.coeffs, atol=1e-10)


def test_no_model_adaptation_policy_keeps_stage1_contrasts(candidates, contrasts1):
    data = _summary([0.1, 0.2, 0.3, 0.4, 0.5])
    out = run_interim(data, candidates, 120,
                      AdaptationConfig(0.0, ModelPolicy.NO_MODEL_ADAPTATION))
    assert_allclose(out.retained_doses, DOSES)
    # with unchanged doses, linear and linear-log contrasts equal their
    # stage-1 versions exactly
    fresh = contrasts_for_models(candidates, DOSES, out.stage2_contrasts.n)
    assert_allclose(out.stage2_contrasts.coeffs[1], fresh.coeffs[1], atol=1e-12)
    assert_allclose(out.stage2_contrasts.coeffs[2], fresh.coeffs[2], atol=1e-12)


def test_carryover_restriction_recenters_and_renormalizes(stage1, candidates, contrasts1):
    # force the both-fail pairing: emax carries over its stage-1 contrast
    out = adapt_models(stage1, candidates, np.array([0.0, 0.2, 0.6]),
                       np.full(3, 40), AdaptationConfig(0.0), contrasts1)
    # hand-computed carry-over of the stage-1 emax contrast
    row = contrasts1.coeffs[0][[0, 2, 3]]
    row = row - row.mean()
    row = row / np.linalg.norm(row)
    # the example's emax refit converges, so provenance is refit; check
    # the helper directly instead
    from adaptmct.adapt import _restricted_carryover

    assert_allclose(_restricted_carryover(contrasts1.coeffs[0], np.array([0, 2, 3])),
                    row, atol=1e-12)
    assert abs(row.sum()) < 1e-12 and np.linalg.norm(row) == pytest.approx(1.0)


def test_provenance_is_exhaustive(stage1, candidates, interim):
    assert len(interim.provenance) == len(candidates)
    assert all(isinstance(p, Provenance) for p in interim.provenance)


def test_futility_outcome_shape(candidates):
    out = run_interim(_summary([0.9, 0.1, 0.2, 0.3, 0.4]), candidates, 120,
                      AdaptationConfig(0.0))
    assert out.futility_stop
    assert_allclose(out.retained_doses, [0.0])
    assert out.stage2_contrasts is None
