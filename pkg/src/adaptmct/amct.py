"""Adaptive multiple contrast test via the conditional rejection
probability principle, for known and unknown variance.

The pre-specified base test reuses the first-stage design in stage 2
(same contrasts, doses and group sizes).  Given first-stage data, the
conditional probability that the base test would reject (the
conditional error ``A``) is computed, and the adaptive critical value
is the bound at which the conditional rejection probability of the
*adapted* second stage equals ``A``.  Any measurable adaptation of the
second-stage design then preserves the overall level.

Known variance works entirely with conditional multivariate normal
laws.  Unknown variance conditions on the first-stage data, under
which the combined t statistics follow a noncentral-like law
``(b + X) / sqrt(W/nu + q)`` with ``X`` Gaussian and ``W`` chi-square:
its orthant probabilities are the chi-square mixture integrals
implemented in :mod:`adaptmct.mvprob`.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy.optimize import brentq

from .adapt import AdaptationOutcome
from .contrasts import ContrastSet
from .models import StageSummary
from .mvprob import (
    conditional_t_orthant,
    gaussian_box_prob,
    mv_equicoordinate_quantile,
)

__all__ = [
    "BaseTestSpec",
    "CrpState",
    "AmctResult",
    "amct_known_variance",
    "amct_unknown_variance",
    "known_variance_conditional_error",
]


@dataclass(frozen=True, eq=False)
class BaseTestSpec:
    """The pre-specified second stage: a copy of the first-stage design."""

    contrasts: ContrastSet  # first-stage contrasts, reused as-is
    doses: np.ndarray
    n2: np.ndarray

    @classmethod
    def from_stage1(cls, contrasts: ContrastSet) -> "BaseTestSpec":
        return cls(contrasts=contrasts, doses=contrasts.doses, n2=contrasts.n)


@dataclass(frozen=True, eq=False)
class CrpState:
    """Diagnostics of one conditional-rejection-probability computation.

    ``adapted_cov`` stores the conditional covariance of the combined
    statistics exactly as derived (un-normalized diagonal below 1).
    ``adaptive_critical`` is NaN when only the rejection decision was
    requested.
    """

    base_critical: float
    conditional_error: float
    adapted_shift: np.ndarray | None = None
    adapted_cov: np.ndarray | None = None
    adaptive_critical: float = float("nan")
    extras: dict | None = None


@dataclass(frozen=True, eq=False)
class AmctResult:
    state: CrpState
    stats: np.ndarray | None
    reject: bool


def _combined_denominators(contrasts1: ContrastSet, stage2: ContrastSet | None,
                           n1: np.ndarray, n2: np.ndarray | None):
    d1 = np.sum(contrasts1.coeffs ** 2 / n1, axis=1)
    if stage2 is None:
        return np.sqrt(2.0 * d1)
    d2 = np.sum(stage2.coeffs ** 2 / n2, axis=1)
    return np.sqrt(d1 + d2)


def _conditional_cov(stage2: ContrastSet, n2, den: np.ndarray) -> np.ndarray:
    gram2 = (stage2.coeffs / n2) @ stage2.coeffs.T
    return gram2 / np.outer(den, den)


def known_variance_conditional_error(stage1: StageSummary, contrasts1: ContrastSet,
                                     sigma: float, u_star: float, seed,
                                     **qmc_kw) -> float:
    """Conditional probability that the base test rejects, given stage 1.

    The conditional law of the base-test statistics is normal with the
    stage-1 contrast means over ``sigma * sqrt(2 sum c^2/n)`` and
    covariance ``corr / 2``.
    """
    qmc_kw.setdefault("target_se", 1e-4)
    den_base = _combined_denominators(contrasts1, None, stage1.n, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = (contrasts1.coeffs @ stage1.means) / (sigma * den_base)
    box, _ = gaussian_box_prob(contrasts1.corr / 2.0, u_star - shift, seed, **qmc_kw)
    return float(min(1.0, max(0.0, 1.0 - box)))


def amct_known_variance(stage1: StageSummary, stage2: StageSummary | None,
                        base: BaseTestSpec, outcome: AdaptationOutcome,
                        sigma: float, alpha: float, seed, *,
                        u_star: float | None = None,
                        critical_value: bool = True,
                        quantile_tol: float = 5e-4,
                        target_se: float = 1e-4,
                        root_xtol: float = 1e-6,
                        qmc_log2: int | None = None,
                        qmc_shifts: int = 8) -> AmctResult:
    """Adaptive multiple contrast test with known standard deviation.

    Parameters
    ----------
    stage1, stage2 : StageSummary
        ``stage2`` is ignored (may be None) on a futility stop.
    base : BaseTestSpec
    outcome : AdaptationOutcome
        Interim decision; supplies the adapted contrasts.
    sigma : float
        Known standard deviation of the responses.
    alpha : float
    seed : int
        Drives every QMC evaluation; fixed seed => fixed output.
    u_star : float, optional
        Precomputed base critical value (reused across replicates in
        simulations).
    critical_value : bool
        When False, only the rejection decision is computed: rejection
        happens iff the conditional tail probability at the observed
        maximum statistic is at most the conditional error, which is
        equivalent to comparing against the adaptive critical value.

    Returns
    -------
    AmctResult
    """
    rng = np.random.default_rng(seed)
    seeds = rng.integers(2 ** 63, size=4)
    qmc_kw = {"target_se": target_se}
    if qmc_log2 is not None:
        qmc_kw.update(min_log2=qmc_log2, max_log2=qmc_log2, shifts=qmc_shifts)
    contrasts1 = base.contrasts
    if u_star is None:
        u_star = mv_equicoordinate_quantile(contrasts1.corr, math.inf, 1.0 - alpha,
                                            int(seeds[0]), prob_tol=quantile_tol)
    a = known_variance_conditional_error(stage1, contrasts1, sigma, u_star,
                                         int(seeds[1]), **qmc_kw)
    if outcome.futility_stop:
        state = CrpState(base_critical=float(u_star), conditional_error=a)
        return AmctResult(state=state, stats=None, reject=False)

    c2 = outcome.stage2_contrasts
    n2 = np.asarray(stage2.n, dtype=float)
    den = _combined_denominators(contrasts1, c2, stage1.n, n2)
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = (contrasts1.coeffs @ stage1.means) / (sigma * den)
        cov = _conditional_cov(c2, n2, den)
        stats = (contrasts1.coeffs @ stage1.means + c2.coeffs @ stage2.means) / (sigma * den)

    def tail(u: float) -> float:
        box, _ = gaussian_box_prob(cov, u - shift, int(seeds[2]), **qmc_kw)
        return 1.0 - box

    u_tilde = float("nan")
    smax = float(np.max(stats))  # NaN propagates and never rejects
    if critical_value:
        lo = float(np.min(shift)) - 10.0 if np.all(np.isfinite(shift)) else -20.0
        hi = float(np.max(shift)) + 10.0 if np.all(np.isfinite(shift)) else 20.0
        u_tilde = _solve_decreasing(tail, a, lo=lo, hi=hi, xtol=root_xtol)
        reject = bool(smax >= u_tilde)
    elif math.isnan(smax):
        reject = False
    elif smax == math.inf:
        reject = True
    else:
        reject = bool(tail(smax) <= a)
    state = CrpState(base_critical=float(u_star), conditional_error=a,
                     adapted_shift=shift, adapted_cov=cov,
                     adaptive_critical=u_tilde)
    return AmctResult(state=state, stats=stats, reject=reject)


def _solve_decreasing(tail, target: float, lo: float, hi: float, xtol: float) -> float:
    """Root of ``tail(u) = target`` for a nonincreasing tail function."""
    if target >= 1.0 - 1e-12:
        return -math.inf
    if target <= 1e-12:
        return math.inf
    f = lambda u: tail(u) - target
    flo, fhi = f(lo), f(hi)
    tries = 0
    while flo < 0 and tries < 60:  # tail(lo) below target: widen downward
        lo -= 5.0
        flo = f(lo)
        tries += 1
    while fhi > 0 and tries < 120:
        hi += 5.0
        fhi = f(hi)
        tries += 1
    if flo < 0 or fhi > 0:
        raise RuntimeError("failed to bracket the adaptive critical value")
    return float(brentq(f, lo, hi, xtol=xtol))


def amct_unknown_variance(stage1: StageSummary, stage2: StageSummary | None,
                          base: BaseTestSpec, outcome: AdaptationOutcome,
                          sigma_ref: float, alpha: float, seed, *,
                          c_star: float | None = None,
                          critical_value: bool = True,
                          quantile_tol: float = 5e-4,
                          orthant_tol: float = 1e-3,
                          bisect_tol: float = 1e-7) -> AmctResult:
    """Adaptive multiple contrast test with estimated variance.

    The conditional error depends on the unknown variance; it is
    evaluated at ``sigma_ref``.  There is no universally right plug-in:
    examples and simulations here use the true generating value, and a
    practical analysis may substitute the first-stage estimate.  The
    choice is the caller's, which is why the argument is explicit.

    The adaptive critical value is found by bisection (to
    ``bisect_tol`` on the bracket width) on the conditional orthant
    probability of the adapted law; with ``critical_value=False`` only
    the rejection decision is computed via the equivalent comparison
    ``orthant(max T) <= A``.
    """
    rng = np.random.default_rng(seed)
    seeds = rng.integers(2 ** 63, size=4)
    contrasts1 = base.contrasts
    nu1 = stage1.df
    if nu1 < 1:
        raise ValueError("unknown-variance test needs stage-1 degrees of freedom")
    if c_star is None:
        c_star = mv_equicoordinate_quantile(contrasts1.corr, 2.0 * nu1, 1.0 - alpha,
                                            int(seeds[0]), prob_tol=quantile_tol)
    den1 = np.sqrt(np.sum(contrasts1.coeffs ** 2 / stage1.n, axis=1))
    b_base = (contrasts1.coeffs @ stage1.means) / (sigma_ref * den1)
    q_base = stage1.ss_within / (nu1 * sigma_ref ** 2)
    a = conditional_t_orthant(contrasts1.corr, b_base, q_base, nu1, nu1,
                              float(c_star), seed=int(seeds[1]), tol=orthant_tol)
    extras = {"nu1": nu1, "q_base": q_base}
    if outcome.futility_stop:
        state = CrpState(base_critical=float(c_star), conditional_error=a, extras=extras)
        return AmctResult(state=state, stats=None, reject=False)

    c2 = outcome.stage2_contrasts
    n2 = np.asarray(stage2.n, dtype=float)
    nu2 = stage2.df
    nu = nu1 + nu2
    den = _combined_denominators(contrasts1, c2, stage1.n, n2)
    b = (contrasts1.coeffs @ stage1.means) / (sigma_ref * den)
    cov = _conditional_cov(c2, n2, den)
    q = stage1.ss_within / (nu * sigma_ref ** 2)
    extras.update({"nu2": nu2, "q_adapted": q})

    pooled_var = (stage1.ss_within + stage2.ss_within) / nu
    with np.errstate(divide="ignore", invalid="ignore"):
        stats = (contrasts1.coeffs @ stage1.means + c2.coeffs @ stage2.means) \
            / (math.sqrt(pooled_var) * den)

    def orthant(c: float) -> float:
        return conditional_t_orthant(cov, b, q, nu2, nu, c,
                                     seed=int(seeds[2]), tol=orthant_tol)

    c_tilde = float("nan")
    smax = float(np.max(stats))
    if critical_value:
        lo = float(np.min(b) / math.sqrt(max(q, 1e-12))) - 10.0
        if not math.isfinite(lo):
            lo = -20.0
        c_tilde = _bisect_decreasing(orthant, a, lo=lo, hi=float(c_star) + 10.0,
                                     xtol=bisect_tol)
        reject = bool(smax >= c_tilde)
    elif math.isnan(smax):
        reject = False
    elif smax == math.inf:
        reject = True
    else:
        reject = bool(orthant(smax) <= a)
    state = CrpState(base_critical=float(c_star), conditional_error=a,
                     adapted_shift=b, adapted_cov=cov,
                     adaptive_critical=c_tilde, extras=extras)
    return AmctResult(state=state, stats=stats, reject=reject)


def _bisect_decreasing(fn, target: float, lo: float, hi: float, xtol: float) -> float:
    """Plain bisection for ``fn(x) = target`` with ``fn`` nonincreasing."""
    if target >= 1.0 - 1e-12:
        return -math.inf
    if target <= 1e-12:
        return math.inf
    flo, fhi = fn(lo) - target, fn(hi) - target
    tries = 0
    while flo < 0 and tries < 60:
        lo -= 5.0
        flo = fn(lo) - target
        tries += 1
    while fhi > 0 and tries < 120:
        hi += 5.0
        fhi = fn(hi) - target
        tries += 1
    if flo < 0 or fhi > 0:
        raise RuntimeError("failed to bracket the adaptive critical value")
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        if fn(mid) - target > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
