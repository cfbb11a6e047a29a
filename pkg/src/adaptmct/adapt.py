"""Interim-analysis logic: dose dropping and candidate-model adaptation.

The dose rule keeps placebo, drops active doses that underperform
placebo by more than the threshold ``delta``, then walks the survivors
in increasing order keeping each dose only if its mean exceeds the
mean of the largest retained dose so far minus ``delta``.  If every
active dose falls below placebo by more than ``delta`` the trial stops
for futility.

Model adaptation refits each candidate to the first-stage data and
rebuilds optimal contrasts at the retained doses.  Nonlinear fits can
fail; the fallback policy is: a single failure among the emax/logistic
pair takes the isotonic-regression contrast, a double failure gives
the logistic the isotonic contrast while the emax carries over its
first-stage contrast (restricted to the retained doses, re-centered
and renormalized).  A negative fitted linear slope suppresses model
adaptation entirely: second-stage contrasts are then recomputed from
the original candidate models at the retained doses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .contrasts import ContrastSet, DegenerateContrast, build_contrast_set, optimal_contrast
from .models import (
    ConvergenceFailure,
    DoseResponseModel,
    ModelFamily,
    StageSummary,
    evaluate,
    fit,
    isotonic_means,
)

__all__ = [
    "ModelPolicy",
    "Provenance",
    "AdaptationConfig",
    "AdaptationOutcome",
    "SE_RULE",
    "adapt_doses",
    "adapt_models",
    "run_interim",
    "stage2_group_sizes",
]

SE_RULE = "se-rule"


class ModelPolicy(str, Enum):
    REFIT_WITH_FALLBACKS = "refit-with-fallbacks"
    NO_MODEL_ADAPTATION = "no-model-adaptation"


class Provenance(str, Enum):
    """How each model's second-stage contrast was produced."""

    REFIT = "refit"
    ISOTONIC_FALLBACK = "isotonic-fallback"
    CARRY_OVER = "carry-over"
    NEGATIVE_SLOPE_NO_ADAPT = "negative-slope-no-adapt"


@dataclass(frozen=True)
class AdaptationConfig:
    """Interim adaptation settings.

    ``delta`` is the dose-dropping threshold (>= 0), or the string
    ``"se-rule"`` to use one standard error of the difference between
    the two group means being compared (from the pooled first-stage
    variance).  ``model_policy`` selects whether candidate models are
    refit at the interim.
    """

    delta: object = 0.0
    model_policy: ModelPolicy = ModelPolicy.REFIT_WITH_FALLBACKS

    def __post_init__(self):
        policy = ModelPolicy(self.model_policy)
        object.__setattr__(self, "model_policy", policy)
        if isinstance(self.delta, str):
            if self.delta != SE_RULE:
                raise ValueError(f"delta must be a number >= 0 or '{SE_RULE}'")
        else:
            d = float(self.delta)
            if d < 0 or not np.isfinite(d):
                raise ValueError("numeric delta must be finite and >= 0")
            object.__setattr__(self, "delta", d)


@dataclass(frozen=True, eq=False)
class AdaptationOutcome:
    """Result of the interim analysis.

    ``retained_doses`` always starts with placebo; when
    ``futility_stop`` is set it contains only placebo and the
    second-stage fields are ``None``.  ``provenance`` has one tag per
    candidate model; ``models`` holds refitted models where available.
    ``notes`` records degenerate-contrast repairs.
    """

    retained_doses: np.ndarray
    futility_stop: bool
    stage2_contrasts: ContrastSet | None = None
    provenance: tuple = ()
    models: tuple = ()
    notes: tuple = ()


def _thresholds(stage1: StageSummary, config: AdaptationConfig):
    """Per-comparison threshold function delta(i, j) for group indices."""
    if config.delta == SE_RULE:
        s2 = stage1.pooled_variance()

        def delta(i: int, j: int) -> float:
            return float(np.sqrt(s2 * (1.0 / stage1.n[i] + 1.0 / stage1.n[j])))
    else:
        const = float(config.delta)

        def delta(i: int, j: int) -> float:
            return const

    return delta


def adapt_doses(stage1: StageSummary, config: AdaptationConfig):
    """Apply the dose-dropping rule to first-stage summaries.

    Returns the retained dose vector (always containing placebo), or
    ``None`` for a futility stop (every active dose mean below the
    placebo mean by more than the threshold).

    Boundary conventions: an active dose survives the placebo screen
    when ``mean_i - mean_placebo >= -delta`` and survives the
    adjacent-dose walk only when its mean strictly exceeds the last
    retained mean minus ``delta``.
    """
    delta = _thresholds(stage1, config)
    means = stage1.means
    k = stage1.k
    survivors = [i for i in range(1, k) if means[i] - means[0] >= -delta(i, 0)]
    if not survivors:
        return None
    retained = [0]
    for i in survivors:
        anchor = retained[-1]
        if means[i] - means[anchor] > -delta(i, anchor):
            retained.append(i)
    return stage1.doses[np.array(retained)]


def stage2_group_sizes(n_total: int, k: int) -> np.ndarray:
    """Split a stage total over ``k`` groups; remainder goes to the lowest doses."""
    if k < 1 or n_total < k:
        raise ValueError("need at least one subject per retained group")
    base, rem = divmod(int(n_total), int(k))
    sizes = np.full(k, base, dtype=int)
    sizes[:rem] += 1
    return sizes


def _restricted_carryover(row: np.ndarray, idx: np.ndarray):
    """Restrict a stage-1 contrast to retained doses; re-center, renormalize."""
    c = row[idx].astype(float)
    c = c - c.mean()
    norm = np.linalg.norm(c)
    if norm <= 1e-12:
        raise DegenerateContrast("restricted contrast collapsed to zero")
    return c / norm


def adapt_models(stage1: StageSummary, candidates, retained_doses, n2,
                 config: AdaptationConfig,
                 stage1_contrasts: ContrastSet | None = None) -> AdaptationOutcome:
    """Build second-stage contrasts for the retained doses.

    Parameters
    ----------
    stage1 : StageSummary
    candidates : sequence of DoseResponseModel
        The pre-specified first-stage candidate set.
    retained_doses : array_like
        Output of :func:`adapt_doses` (placebo first).
    n2 : array_like of int
        Second-stage group sizes, aligned with ``retained_doses``.
    config : AdaptationConfig
    stage1_contrasts : ContrastSet, optional
        First-stage contrasts; required to honour carry-over fallbacks.
        Computed from the candidates when omitted.
    """
    retained = np.asarray(retained_doses, dtype=float)
    n2 = np.asarray(n2, dtype=int)
    if retained.size < 2:
        raise ValueError("model adaptation needs at least placebo plus one dose")
    idx = _retained_indices(stage1.doses, retained)
    candidates = tuple(candidates)
    if stage1_contrasts is None:
        from .contrasts import contrasts_for_models

        stage1_contrasts = contrasts_for_models(candidates, stage1.doses, stage1.n)

    m = len(candidates)
    profiles: list = [None] * m
    provenance: list = [None] * m
    fitted: list = [None] * m
    notes: list = []

    refit_allowed = config.model_policy is ModelPolicy.REFIT_WITH_FALLBACKS
    if refit_allowed:
        linear_fit = fit(ModelFamily.LINEAR, stage1)
        if linear_fit.theta[1] < 0:
            refit_allowed = False
            provenance = [Provenance.NEGATIVE_SLOPE_NO_ADAPT] * m
            profiles = [evaluate(c, retained) for c in candidates]

    if config.model_policy is ModelPolicy.NO_MODEL_ADAPTATION:
        provenance = [Provenance.CARRY_OVER] * m
        profiles = [evaluate(c, retained) for c in candidates]
    elif refit_allowed:
        iso_profile = None
        failures = {}
        for j, cand in enumerate(candidates):
            res = fit(cand.family, stage1)
            if isinstance(res, ConvergenceFailure):
                failures[j] = res
            else:
                fitted[j] = res
                profiles[j] = evaluate(res, retained)
                provenance[j] = Provenance.REFIT
        emax_failed = [j for j in failures if candidates[j].family is ModelFamily.EMAX]
        logi_failed = [j for j in failures if candidates[j].family is ModelFamily.LOGISTIC]
        both = bool(emax_failed) and bool(logi_failed)
        for j in failures:
            if both and j in emax_failed:
                provenance[j] = Provenance.CARRY_OVER
                profiles[j] = None
            else:
                if iso_profile is None:
                    iso_profile = isotonic_means(stage1.means, stage1.n)
                provenance[j] = Provenance.ISOTONIC_FALLBACK
                profiles[j] = iso_profile[idx]

    rows = np.empty((m, retained.size))
    for j in range(m):
        rows[j] = _contrast_with_fallbacks(
            j, profiles[j], provenance, stage1, stage1_contrasts, idx, retained, n2, notes
        )

    return AdaptationOutcome(
        retained_doses=retained,
        futility_stop=False,
        stage2_contrasts=build_contrast_set(rows, retained, n2),
        provenance=tuple(provenance),
        models=tuple(fitted),
        notes=tuple(notes),
    )


def _retained_indices(doses: np.ndarray, retained: np.ndarray) -> np.ndarray:
    idx = []
    for d in retained:
        match = np.where(doses == d)[0]
        if match.size != 1:
            raise ValueError(f"retained dose {d} is not a stage-1 dose")
        idx.append(int(match[0]))
    return np.asarray(idx, dtype=int)


def _contrast_with_fallbacks(j, profile, provenance, stage1, stage1_contrasts,
                             idx, retained, n2, notes) -> np.ndarray:
    """Contrast for model ``j`` with a degenerate-profile repair cascade."""
    if profile is not None:
        try:
            return optimal_contrast(profile, n2.astype(float))
        except DegenerateContrast:
            notes.append(f"model {j}: degenerate profile, carrying over stage-1 contrast")
            provenance[j] = Provenance.CARRY_OVER
    # Carry-over of the first-stage contrast, restricted to retained doses.
    try:
        return _restricted_carryover(stage1_contrasts.coeffs[j], idx)
    except DegenerateContrast:
        pass
    # Isotonic profile, then the centered dose vector as a last resort.
    try:
        iso = isotonic_means(stage1.means, stage1.n)[idx]
        c = optimal_contrast(iso, n2.astype(float))
        notes.append(f"model {j}: carry-over degenerate, used isotonic contrast")
        provenance[j] = Provenance.ISOTONIC_FALLBACK
        return c
    except DegenerateContrast:
        notes.append(f"model {j}: all profiles degenerate, used centered doses")
        provenance[j] = Provenance.CARRY_OVER
        return optimal_contrast(retained, n2.astype(float))


def run_interim(stage1: StageSummary, candidates, n2_total: int,
                config: AdaptationConfig,
                stage1_contrasts: ContrastSet | None = None) -> AdaptationOutcome:
    """Full interim analysis: dose rule, then model adaptation.

    Returns an outcome with ``futility_stop=True`` (and no contrasts)
    when the dose rule stops the trial.
    """
    retained = adapt_doses(stage1, config)
    if retained is None:
        return AdaptationOutcome(
            retained_doses=np.array([0.0]), futility_stop=True,
            provenance=tuple(), models=tuple(), notes=("futility stop",),
        )
    if retained.size < 2:
        # Possible only with exactly tied means (strict comparisons drop
        # every active dose without triggering the futility screen).
        from .models import DegenerateDesign

        raise DegenerateDesign("only placebo retained at the interim; "
                               "no second-stage contrast exists")
    n2 = stage2_group_sizes(n2_total, retained.size)
    return adapt_models(stage1, candidates, retained, n2, config, stage1_contrasts)
