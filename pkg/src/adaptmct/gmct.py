"""Stage-wise generalized multiple contrast tests and p-value combination.

A stage test computes one contrast statistic per candidate model and
collapses the resulting dependent one-sided p-values into a single
stage p-value via Tippett's minimum, Fisher's product, or the inverse
normal sum.  Tippett's version is evaluated against the exact joint
null law of the statistics (a central multivariate normal or t box
probability); the Fisher and inverse normal versions are calibrated by
seeded Monte Carlo simulation of that null law, returning the standard
``(1 + #{psi_sim >= psi_obs}) / (B + 1)`` estimate, which is a valid
p-value for any number of draws.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import math
import warnings

import numpy as np
from scipy.special import ndtr, ndtri, stdtr
from scipy.stats import chi2

from .contrasts import ContrastSet
from .models import StageSummary
from .mvprob import _as_generator, _chol_psd, t_box_prob

__all__ = [
    "CombinationMethod",
    "DegenerateVariance",
    "GmctResult",
    "contrast_t_stats",
    "contrast_z_stats",
    "raw_upper_p",
    "simulate_null_psi",
    "stage_p_value",
    "run_gmct_stage",
    "combine_across",
    "P_FLOOR",
]

P_FLOOR = 1e-12  # floor applied before logs / normal quantiles


class DegenerateVariance(ValueError):
    """Raised when a t statistic is requested with zero pooled variance."""


class CombinationMethod(str, Enum):
    TIPPETT = "tippett"
    FISHER = "fisher"
    INVERSE_NORMAL = "inverse-normal"

    @classmethod
    def from_tag(cls, tag) -> "CombinationMethod":
        if isinstance(tag, cls):
            return tag
        key = str(tag).strip().lower().replace("_", "-")
        aliases = {"t": "tippett", "f": "fisher", "n": "inverse-normal",
                   "invnormal": "inverse-normal", "inverse normal": "inverse-normal"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True, eq=False)
class GmctResult:
    """Outcome of one stage-wise generalized multiple contrast test."""

    t_stats: np.ndarray
    raw_p: np.ndarray
    psi: float
    stage_p: float
    method: CombinationMethod
    df: float  # inf when the variance is treated as known


def contrast_t_stats(data: StageSummary, contrasts: ContrastSet) -> np.ndarray:
    """Contrast t statistics with the stage's pooled variance estimate.

    ``T_m = sum_i c_mi ybar_i / (S * sqrt(sum_i c_mi^2 / n_i))`` with
    ``S^2`` the pooled within-group variance of the stage.
    """
    _check_alignment(data, contrasts)
    if data.df < 1 or data.ss_within <= 0.0:
        raise DegenerateVariance("stage has no positive pooled variance estimate")
    s = math.sqrt(data.pooled_variance())
    den = np.sqrt(np.sum(contrasts.coeffs ** 2 / data.n, axis=1))
    return (contrasts.coeffs @ data.means) / (s * den)


def contrast_z_stats(data: StageSummary, contrasts: ContrastSet, sigma: float) -> np.ndarray:
    """Contrast z statistics for a known standard deviation ``sigma``."""
    _check_alignment(data, contrasts)
    den = np.sqrt(np.sum(contrasts.coeffs ** 2 / data.n, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        return (contrasts.coeffs @ data.means) / (sigma * den)


def _check_alignment(data: StageSummary, contrasts: ContrastSet):
    if contrasts.k != data.k or not np.array_equal(contrasts.doses, data.doses):
        raise ValueError("contrast set and stage summary refer to different designs")


def raw_upper_p(stats, df: float) -> np.ndarray:
    """One-sided upper-tail p-values of normal (df=inf) or t statistics."""
    stats = np.asarray(stats, dtype=float)
    if math.isinf(df):
        return ndtr(-stats)
    return stdtr(df, -stats)


def _psi_values(stats, df: float, method: CombinationMethod):
    p = np.clip(raw_upper_p(stats, df), P_FLOOR, 1.0)
    if method is CombinationMethod.TIPPETT:
        return np.min(p, axis=-1)
    if method is CombinationMethod.FISHER:
        return -2.0 * np.sum(np.log(p), axis=-1)
    return np.sum(ndtri(1.0 - p), axis=-1)


def simulate_null_psi(corr, df: float, method: CombinationMethod, draws: int,
                      seed) -> np.ndarray:
    """Draws of the combination statistic under the joint null law.

    Simulates the central multivariate normal (``df = inf``) or t law
    with a shared chi-square denominator, then forms the requested
    combination statistic per draw.  Used directly by the Monte Carlo
    calibration and reusable as a shared null table across replicates.
    """
    corr = np.asarray(corr, dtype=float)
    method = CombinationMethod.from_tag(method)
    rng = _as_generator(seed)
    L = _chol_psd(corr)
    z = rng.standard_normal((int(draws), corr.shape[0])) @ L.T
    if not math.isinf(df):
        w = rng.chisquare(df, int(draws)) / df
        z = z / np.sqrt(w)[:, None]
    return _psi_values(z, df, method)


def stage_p_value(t_stats, corr, df: float, method, seed,
                  draws: int = 200_000, qmc_log2: int | None = None,
                  qmc_shifts: int = 8) -> float:
    """Stage p-value of a generalized multiple contrast test.

    Parameters
    ----------
    t_stats : array_like
        Observed contrast statistics (t, or z when ``df`` is inf).
    corr : array_like
        Their null correlation matrix.
    df : float
        Degrees of freedom of the shared variance estimate; ``inf``
        for known variance.
    method : CombinationMethod or str
    seed : int or Generator
        Required; Tippett uses it for the QMC box probability, the
        other methods for the calibration draws.
    draws : int
        Monte Carlo calibration size for Fisher / inverse normal.
    qmc_log2, qmc_shifts
        Optional fixed QMC sizing for the Tippett box probability
        (defaults: adaptive points, 8 shifts).
    """
    method = CombinationMethod.from_tag(method)
    t_stats = np.asarray(t_stats, dtype=float)
    corr = np.asarray(corr, dtype=float)
    if method is CombinationMethod.TIPPETT:
        tmax = float(np.max(t_stats))
        if math.isnan(tmax):
            return float("nan")
        kw = {}
        if qmc_log2 is not None:
            kw = {"min_log2": qmc_log2, "max_log2": qmc_log2, "shifts": qmc_shifts}
        box, _ = t_box_prob(corr, np.full(t_stats.size, tmax), df, seed, **kw)
        return float(min(1.0, max(0.0, 1.0 - box)))
    psi_obs = float(_psi_values(t_stats, df, method))
    psi_sim = simulate_null_psi(corr, df, method, draws, seed)
    return float((1 + np.sum(psi_sim >= psi_obs)) / (draws + 1))


def run_gmct_stage(data: StageSummary, contrasts: ContrastSet, method, seed,
                   sigma: float | None = None, draws: int = 200_000,
                   qmc_log2: int | None = None, qmc_shifts: int = 8) -> GmctResult:
    """Convenience wrapper: statistics, raw p-values and the stage p-value."""
    method = CombinationMethod.from_tag(method)
    if sigma is None:
        stats = contrast_t_stats(data, contrasts)
        df = float(data.df)
    else:
        stats = contrast_z_stats(data, contrasts, sigma)
        df = math.inf
    raw = raw_upper_p(stats, df)
    psi = float(_psi_values(stats, df, method))
    p = stage_p_value(stats, contrasts.corr, df, method, seed, draws,
                      qmc_log2=qmc_log2, qmc_shifts=qmc_shifts)
    return GmctResult(stats, raw, psi, p, method, df)


def combine_across(p1: float, p2: float, method) -> tuple:
    """Combine two independent stage p-values into an overall test.

    Fisher: ``psi = -2 (log p1 + log p2)``, upper tail of chi-square
    with 4 degrees of freedom.  Inverse normal (equal weights):
    ``psi = Phi^-1(1-p1) + Phi^-1(1-p2)``, overall
    ``p = 1 - Phi(psi / sqrt(2))``.  Tippett is not defined across
    stages.  Zero p-values are floored at ``P_FLOOR`` with a warning.

    Returns
    -------
    (psi, overall_p) : tuple of float
    """
    method = CombinationMethod.from_tag(method)
    if method is CombinationMethod.TIPPETT:
        raise ValueError("across-stage combination supports fisher and inverse-normal only")
    for name, p in (("p1", p1), ("p2", p2)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    if min(p1, p2) < P_FLOOR:
        warnings.warn(f"stage p-value below {P_FLOOR:g} floored before combination",
                      RuntimeWarning, stacklevel=2)
    p1 = min(max(float(p1), P_FLOOR), 1.0)
    p2 = min(max(float(p2), P_FLOOR), 1.0)
    if method is CombinationMethod.FISHER:
        psi = -2.0 * (math.log(p1) + math.log(p2))
        return psi, float(chi2.sf(psi, 4))
    psi = float(ndtri(1.0 - p1) + ndtri(1.0 - p2))
    return psi, float(1.0 - ndtr(psi / math.sqrt(2.0)))
