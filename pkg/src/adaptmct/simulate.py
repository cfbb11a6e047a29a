"""Replicated two-stage trial simulation with reproducible parallelism.

Each replicate draws group-level sufficient statistics (means and
pooled within-group sums of squares) for stage 1, runs the interim
adaptation, draws stage-2 data at the retained doses, and evaluates
every requested method on the same simulated trial (common random
numbers).  Non-adaptive comparators reuse the stage-1 data plus an
independent top-up to a one-stage design of total size N1+N2 at the
original doses.

Randomness is organized as counter-based Philox substreams keyed by
(scenario seed, purpose, replicate), so results are bit-identical for
any degree of parallelism and any chunking of the replicate range.

Method identifiers
------------------
``agmct-{t|f|n}-{adaptive|nonadaptive}-{known|unknown}``
    Generalized multiple contrast tests (Tippett / Fisher / inverse
    normal within stages; stages combined with the configured
    across-stage rule, inverse normal by default).  ``known`` uses z
    statistics with the true sigma; ``unknown`` uses stage-wise t
    statistics.
``amct-{adaptive|nonadaptive}-known``
    Adaptive multiple contrast test under the conditional rejection
    probability principle (known variance).  The non-adaptive variant
    is the one-stage maximum-contrast test.
``amct-adaptive-unknown``
    Available but expensive (chi-square mixture integrals per
    replicate); excluded from the default method set.
``naive-pooling``
    Diagnostic only: a one-stage test on the concatenated two-stage
    data with the adapted contrasts, ignoring the adaptation.  Known
    to inflate the Type I error; never part of the default set.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import math
import os
import time

import numpy as np

from .adapt import AdaptationConfig, AdaptationOutcome, Provenance, run_interim, stage2_group_sizes
from .amct import BaseTestSpec, amct_known_variance, amct_unknown_variance
from .contrasts import ContrastSet, contrasts_for_models
from .gmct import (
    P_FLOOR,
    CombinationMethod,
    _psi_values,
    combine_across,
    raw_upper_p,
    simulate_null_psi,
    stage_p_value,
)
from .models import DoseResponseModel, StageSummary, default_candidates, evaluate
from .mvprob import t_box_prob
from .rngstream import substream, substream_seed

__all__ = [
    "SimulationScenario",
    "SimulationReport",
    "ReportRow",
    "TrialRecord",
    "DEFAULT_TABLE_METHODS",
    "run_trial",
    "run_study",
    "default_thread_count",
]

# Stream purpose tags (frozen; changing them changes every result).
_P_STAGE1 = 1
_P_STAGE2 = 2
_P_NONADAPT = 3
_P_ANALYSIS = 4
_T_S1_KNOWN = 101
_T_S1_UNKNOWN = 102
_T_NA_UNKNOWN = 103
_T_USTAR = 104
_T_TQNA = 105
_T_TIP_GRID = 106

DEFAULT_TABLE_METHODS = (
    "agmct-t-adaptive-known", "agmct-f-adaptive-known", "agmct-n-adaptive-known",
    "agmct-t-nonadaptive-known", "agmct-f-nonadaptive-known", "agmct-n-nonadaptive-known",
    "agmct-t-adaptive-unknown", "agmct-f-adaptive-unknown", "agmct-n-adaptive-unknown",
    "agmct-t-nonadaptive-unknown", "agmct-f-nonadaptive-unknown", "agmct-n-nonadaptive-unknown",
    "amct-adaptive-known", "amct-nonadaptive-known",
)

_VALID_EXTRA = ("amct-adaptive-unknown", "amct-nonadaptive-unknown", "naive-pooling")


def _validate_methods(methods):
    valid = set(DEFAULT_TABLE_METHODS) | set(_VALID_EXTRA)
    bad = [m for m in methods if m not in valid]
    if bad:
        raise ValueError(f"unknown method id(s) {bad}; valid ids: {sorted(valid)}")
    if not methods:
        raise ValueError("scenario needs at least one method")
    return tuple(methods)


def default_thread_count() -> int:
    env = os.environ.get("ADAPTMCT_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class SimulationScenario:
    """One simulation cell: a generating model, a design, and methods.

    ``stage2_draws`` sizes the per-replicate Monte Carlo calibration of
    the stage-2 Fisher / inverse-normal p-values.  The estimate
    ``(1 + #{psi_sim >= psi_obs}) / (B + 1)`` is a valid p-value for any
    B, so a moderate B costs at most ``1/(B+1)`` of conservatism; the
    stage-1 calibration reuses one ``table_draws``-sized null table.
    """

    name: str
    true_model: DoseResponseModel
    doses: tuple = (0.0, 0.05, 0.20, 0.60, 1.00)
    candidates: tuple = field(default_factory=default_candidates)
    sigma: float = 1.478
    n1_total: int = 120
    n2_total: int = 120
    alpha: float = 0.05
    methods: tuple = DEFAULT_TABLE_METHODS
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    across_stage: str = "inverse-normal"
    replications: int = 10_000
    seed: int = 0
    table_draws: int = 200_000
    stage2_draws: int = 4_095
    qmc_log2: int = 10
    qmc_shifts: int = 6
    collect_diagnostics: bool = False

    def __post_init__(self):
        object.__setattr__(self, "doses", tuple(float(d) for d in self.doses))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "methods", _validate_methods(self.methods))
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        k = len(self.doses)
        if self.n1_total < k or self.n2_total < 2:
            raise ValueError("stage totals too small for the design")
        CombinationMethod.from_tag(self.across_stage)


@dataclass
class TrialRecord:
    """Per-replicate outcome: rejection flags plus interim diagnostics."""

    rejects: dict
    k2: int                # -1 on futility stop
    futility: bool
    negative_slope: bool
    n_isotonic: int
    n_carryover: int
    error: str | None = None
    diag: dict | None = None


# ------------------------------------------------------------------ #
# Per-scenario precomputation
# ------------------------------------------------------------------ #

class _Tables:
    """Scenario-level precomputed quantities (seed-derived, reusable)."""

    def __init__(self, sc: SimulationScenario):
        self.sc = sc
        doses = np.asarray(sc.doses)
        k1 = doses.size
        self.n1 = stage2_group_sizes(sc.n1_total, k1)
        self.mu1 = np.asarray(evaluate(sc.true_model, doses), dtype=float)
        self.contrasts1 = contrasts_for_models(sc.candidates, doses, self.n1)
        self.base = BaseTestSpec.from_stage1(self.contrasts1)
        self.nu1 = int(self.n1.sum() - k1)
        self.den1 = np.sqrt(np.sum(self.contrasts1.coeffs ** 2 / self.n1, axis=1))

        needs = {m for m in sc.methods}
        self.wants_nonadaptive = any("nonadaptive" in m for m in needs)
        self.n_na = stage2_group_sizes(sc.n1_total + sc.n2_total, k1)
        self.n_extra = self.n_na - self.n1
        if self.wants_nonadaptive and np.any(self.n_extra < 1):
            raise ValueError("non-adaptive comparator needs n2_total >= number of doses")
        self.df_na = int(self.n_na.sum() - k1)
        self.den_na = np.sqrt(np.sum(self.contrasts1.coeffs ** 2 / self.n_na, axis=1))

        # Base / one-stage critical values.
        self.u_star = None
        if any(m in needs for m in ("amct-adaptive-known", "amct-nonadaptive-known",
                                    "agmct-t-nonadaptive-known")):
            self.u_star = _equi_quantile_cached(self.contrasts1.corr, math.inf,
                                                1.0 - sc.alpha, substream_seed(sc.seed, _T_USTAR))
        self.t_quant_na = None
        if "agmct-t-nonadaptive-unknown" in needs or "amct-nonadaptive-unknown" in needs:
            self.t_quant_na = _equi_quantile_cached(self.contrasts1.corr, float(self.df_na),
                                                    1.0 - sc.alpha, substream_seed(sc.seed, _T_TQNA))

        # Null psi tables (sorted) for Fisher / inverse-normal lookups.
        corr = self.contrasts1.corr
        self.psi1 = {}
        for variance, df, tag in (("known", math.inf, _T_S1_KNOWN),
                                  ("unknown", float(self.nu1), _T_S1_UNKNOWN)):
            seed = substream_seed(sc.seed, tag)
            for meth in (CombinationMethod.FISHER, CombinationMethod.INVERSE_NORMAL):
                # One draw stream per (variance, method) pair, matching what a
                # direct stage_p_value call with this seed would simulate.
                self.psi1[(variance, meth)] = np.sort(
                    simulate_null_psi(corr, df, meth, sc.table_draws, seed))
        self.psi_na = {}
        if self.wants_nonadaptive:
            for meth in (CombinationMethod.FISHER, CombinationMethod.INVERSE_NORMAL):
                self.psi_na[("known", meth)] = self.psi1[("known", meth)]
                self.psi_na[("unknown", meth)] = np.sort(simulate_null_psi(
                    corr, float(self.df_na), meth, sc.table_draws,
                    substream_seed(sc.seed, _T_NA_UNKNOWN)))

        # Stage-1 Tippett upper-tail curves p(b) = 1 - P(all <= b), on a
        # grid of the maximum statistic (interpolated per replicate).
        grid = np.linspace(-4.0, 10.0, 141)
        seed = substream_seed(sc.seed, _T_TIP_GRID)
        self.tip1 = {}
        for variance, df in (("known", math.inf), ("unknown", float(self.nu1))):
            tail = np.array([1.0 - t_box_prob(corr, np.full(corr.shape[0], b), df, seed,
                                              target_se=1e-4)[0] for b in grid])
            tail = np.minimum.accumulate(tail)  # enforce monotone decrease
            self.tip1[variance] = (grid, tail)

    def tippett_p1(self, variance: str, stat_max: float) -> float:
        grid, tail = self.tip1[variance]
        if math.isnan(stat_max):
            return float("nan")
        if stat_max <= grid[0]:
            return 1.0
        if stat_max >= grid[-1]:
            return float(tail[-1])
        return float(np.interp(stat_max, grid, tail))

    def table_p(self, table: np.ndarray, psi_obs: float) -> float:
        b = table.size
        count_ge = b - int(np.searchsorted(table, psi_obs, side="left"))
        return (1 + count_ge) / (b + 1)


_EQUI_CACHE: dict = {}


def _equi_quantile_cached(corr, df, level, seed):
    from .mvprob import mv_equicoordinate_quantile

    key = (corr.tobytes(), float(df), float(level), int(seed))
    if key not in _EQUI_CACHE:
        _EQUI_CACHE[key] = mv_equicoordinate_quantile(corr, df, level, seed)
    return _EQUI_CACHE[key]


_TABLE_CACHE: dict = {}


def _tables_for(sc: SimulationScenario) -> _Tables:
    key = (sc.name, sc.seed, sc.doses, sc.n1_total, sc.n2_total, sc.sigma,
           sc.alpha, sc.methods, sc.table_draws, tuple(c.theta for c in sc.candidates))
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = _Tables(sc)
    return _TABLE_CACHE[key]


# ------------------------------------------------------------------ #
# One replicate
# ------------------------------------------------------------------ #

def _draw_stage(rng, mu, n, sigma):
    k = mu.size
    means = mu + sigma * rng.standard_normal(k) / np.sqrt(n)
    nu = int(n.sum() - k)
    ss = sigma ** 2 * rng.chisquare(nu) if nu > 0 else 0.0
    return means, float(ss)


def _pool_groups(n1, m1, ss1, n2, m2, ss2):
    """Exact sufficient-statistic pooling of two samples per group."""
    n = n1 + n2
    m = (n1 * m1 + n2 * m2) / n
    cross = float(np.sum(n1 * n2 / n * (m1 - m2) ** 2))
    return n, m, ss1 + ss2 + cross


def _contrast_stats(coeffs, n, means, den, sigma=None, pooled_var=None):
    num = coeffs @ means
    with np.errstate(divide="ignore", invalid="ignore"):
        if sigma is not None:
            return num / (sigma * den)
        return num / (math.sqrt(pooled_var) * den)


def _fisher_invnormal_pvalues(stats, corr, df, seed, draws):
    """Fisher and inverse-normal stage p-values from one shared draw set.

    Draws the null law exactly like :func:`adaptmct.gmct.simulate_null_psi`
    with the same seed (normals first, then the chi-square denominators),
    so the returned p-values equal separate ``stage_p_value`` calls while
    paying for the simulation only once.
    """
    from .mvprob import _chol_psd
    from scipy.special import ndtri

    rng = np.random.default_rng(seed)
    L = _chol_psd(corr)
    z = rng.standard_normal((draws, corr.shape[0])) @ L.T
    if not math.isinf(df):
        w = rng.chisquare(df, draws) / df
        z = z / np.sqrt(w)[:, None]
    p_sim = np.clip(raw_upper_p(z, df), P_FLOOR, 1.0)
    psi_f_sim = -2.0 * np.sum(np.log(p_sim), axis=1)
    psi_n_sim = np.sum(ndtri(1.0 - p_sim), axis=1)
    out = {}
    for comb, sim in ((CombinationMethod.FISHER, psi_f_sim),
                      (CombinationMethod.INVERSE_NORMAL, psi_n_sim)):
        psi_obs = float(_psi_values(np.asarray(stats, dtype=float), df, comb))
        out[comb] = float((1 + np.sum(sim >= psi_obs)) / (draws + 1))
    return out


def run_trial(scenario: SimulationScenario, replicate_index: int) -> TrialRecord:
    """Simulate and analyze one replicate (deterministic in (seed, index))."""
    return _run_replicate(_tables_for(scenario), replicate_index)


def _run_replicate(tb: _Tables, rep: int) -> TrialRecord:
    sc = tb.sc
    try:
        return _run_replicate_inner(tb, rep)
    except Exception as exc:  # aborted replicate, counted separately
        return TrialRecord(rejects={m: False for m in sc.methods}, k2=-1,
                           futility=False, negative_slope=False, n_isotonic=0,
                           n_carryover=0, error=f"{type(exc).__name__}: {exc}")


def _run_replicate_inner(tb: _Tables, rep: int) -> TrialRecord:
    sc = tb.sc
    doses = np.asarray(sc.doses)
    sigma = sc.sigma
    needs = set(sc.methods)
    rejects: dict = {}
    diag: dict = {}

    rng1 = substream(sc.seed, _P_STAGE1, rep)
    ybar1, ss1 = _draw_stage(rng1, tb.mu1, tb.n1, sigma)
    stage1 = StageSummary(doses, tb.n1, ybar1, ss1)

    ana = substream(sc.seed, _P_ANALYSIS, rep)
    seeds = {name: int(s) for name, s in zip(
        ("s1k", "s1u", "s2k", "s2u", "tip2k", "tip2u", "amctk", "amctu", "pool"),
        ana.integers(2 ** 63, size=9))}

    # ---- interim ---------------------------------------------------
    interim = run_interim(stage1, sc.candidates, sc.n2_total, sc.adaptation,
                          tb.contrasts1)
    futile = interim.futility_stop
    prov = interim.provenance
    n_iso = sum(p is Provenance.ISOTONIC_FALLBACK for p in prov)
    n_carry = sum(p is Provenance.CARRY_OVER for p in prov)
    neg_slope = any(p is Provenance.NEGATIVE_SLOPE_NO_ADAPT for p in prov)

    stage2 = None
    if not futile:
        retained = interim.retained_doses
        n2 = stage2_group_sizes(sc.n2_total, retained.size)
        mu2 = np.asarray(evaluate(sc.true_model, retained), dtype=float)
        rng2 = substream(sc.seed, _P_STAGE2, rep)
        ybar2, ss2 = _draw_stage(rng2, mu2, n2, sigma)
        stage2 = StageSummary(retained, n2, ybar2, ss2)

    # ---- adaptive AGMCTs -------------------------------------------
    agmct_adaptive = [(m, m.split("-")[1], m.split("-")[3]) for m in needs
                      if m.startswith("agmct") and "-adaptive-" in m]
    if agmct_adaptive:
        stats1 = {"known": _contrast_stats(tb.contrasts1.coeffs, tb.n1, ybar1,
                                           tb.den1, sigma=sigma)}
        df1 = {"known": math.inf, "unknown": float(stage1.df)}
        s1_var = ss1 / stage1.df if stage1.df > 0 else 0.0
        stats1["unknown"] = _contrast_stats(tb.contrasts1.coeffs, tb.n1, ybar1,
                                            tb.den1, pooled_var=s1_var)
        fn_p2: dict = {}
        if not futile:
            c2 = interim.stage2_contrasts
            den2 = np.sqrt(np.sum(c2.coeffs ** 2 / stage2.n, axis=1))
            s2_var = stage2.ss_within / stage2.df if stage2.df > 0 else 0.0
            stats2 = {"known": _contrast_stats(c2.coeffs, stage2.n, stage2.means,
                                               den2, sigma=sigma),
                      "unknown": _contrast_stats(c2.coeffs, stage2.n, stage2.means,
                                                 den2, pooled_var=s2_var)}
            df2 = {"known": math.inf, "unknown": float(stage2.df)}
            for variance in {v for _, _, v in agmct_adaptive}:
                needs_fn = any(c != "t" and v == variance for _, c, v in agmct_adaptive)
                if needs_fn:
                    fn_p2[variance] = _fisher_invnormal_pvalues(
                        stats2[variance], c2.corr, df2[variance],
                        seeds["s2k" if variance == "known" else "s2u"],
                        sc.stage2_draws)
        for mid, comb_tag, variance in agmct_adaptive:
            comb = CombinationMethod.from_tag(comb_tag)
            if comb is CombinationMethod.TIPPETT:
                p1 = tb.tippett_p1(variance, float(np.max(stats1[variance])))
            else:
                psi1 = float(_psi_values(stats1[variance], df1[variance], comb))
                p1 = tb.table_p(tb.psi1[(variance, comb)], psi1)
            if futile:
                rejects[mid] = False
                continue
            if comb is CombinationMethod.TIPPETT:
                p2 = stage_p_value(stats2[variance], c2.corr, df2[variance], comb,
                                   seeds["tip2k" if variance == "known" else "tip2u"],
                                   qmc_log2=sc.qmc_log2, qmc_shifts=sc.qmc_shifts)
            else:
                p2 = fn_p2[variance][comb]
            _, overall = combine_across(p1, p2, sc.across_stage)
            rejects[mid] = bool(overall <= sc.alpha)
            if sc.collect_diagnostics:
                diag[f"p1-{comb_tag}-{variance}"] = p1
                diag[f"p2-{comb_tag}-{variance}"] = p2
                diag[f"overall-{comb_tag}-{variance}"] = overall

    # ---- non-adaptive comparators ----------------------------------
    if tb.wants_nonadaptive:
        rng3 = substream(sc.seed, _P_NONADAPT, rep)
        ybar_e, ss_e = _draw_stage(rng3, tb.mu1, tb.n_extra, sigma)
        n_na, m_na, ss_na = _pool_groups(tb.n1, ybar1, ss1, tb.n_extra, ybar_e, ss_e)
        z_na = _contrast_stats(tb.contrasts1.coeffs, n_na, m_na, tb.den_na, sigma=sigma)
        var_na = ss_na / tb.df_na
        t_na = _contrast_stats(tb.contrasts1.coeffs, n_na, m_na, tb.den_na,
                               pooled_var=var_na)
        for mid in needs:
            if "nonadaptive" not in mid:
                continue
            variance = mid.split("-")[-1]
            stats = z_na if variance == "known" else t_na
            if mid.startswith("amct") or "-t-" in mid:
                crit = tb.u_star if variance == "known" else tb.t_quant_na
                rejects[mid] = bool(np.max(stats) >= crit)
            else:
                comb = CombinationMethod.from_tag(mid.split("-")[1])
                df = math.inf if variance == "known" else float(tb.df_na)
                psi = float(_psi_values(stats, df, comb))
                p = tb.table_p(tb.psi_na[(variance, comb)], psi)
                rejects[mid] = bool(p <= sc.alpha)

    # ---- adaptive AMCT ----------------------------------------------
    if "amct-adaptive-known" in needs:
        res = amct_known_variance(
            stage1, stage2, tb.base, interim, sigma, sc.alpha, seeds["amctk"],
            u_star=tb.u_star, critical_value=False,
            qmc_log2=sc.qmc_log2, qmc_shifts=sc.qmc_shifts)
        rejects["amct-adaptive-known"] = res.reject
        if sc.collect_diagnostics:
            diag["amct-known-A"] = res.state.conditional_error
    if "amct-adaptive-unknown" in needs:
        res = amct_unknown_variance(
            stage1, stage2, tb.base, interim, sigma, sc.alpha, seeds["amctu"],
            critical_value=False)
        rejects["amct-adaptive-unknown"] = res.reject

    # ---- naive pooling diagnostic ----------------------------------
    if "naive-pooling" in needs:
        rejects["naive-pooling"] = _naive_pooling_reject(tb, stage1, stage2, interim,
                                                         seeds["pool"])

    for mid in needs:
        rejects.setdefault(mid, False)

    return TrialRecord(rejects=rejects, k2=(-1 if futile else stage2.k),
                       futility=futile, negative_slope=neg_slope,
                       n_isotonic=n_iso, n_carryover=n_carry,
                       diag=diag if sc.collect_diagnostics else None)


def _naive_pooling_reject(tb: _Tables, stage1, stage2, interim: AdaptationOutcome,
                          seed: int) -> bool:
    """One-stage Tippett test on pooled two-stage data, ignoring adaptation."""
    sc = tb.sc
    if interim.futility_stop:
        # No second stage exists; pool degenerates to the stage-1 test.
        stats = _contrast_stats(tb.contrasts1.coeffs, tb.n1, stage1.means, tb.den1,
                                pooled_var=stage1.pooled_variance())
        p = tb.tippett_p1("unknown", float(np.max(stats)))
        return bool(p <= sc.alpha)
    idx = np.searchsorted(stage1.doses, stage2.doses)
    n_p, m_p, ss_p = _pool_groups(stage1.n[idx], stage1.means[idx],
                                  stage1.ss_within, stage2.n, stage2.means,
                                  stage2.ss_within)
    # ss_p carries all stage-1 groups (including dropped ones) plus the
    # between-stage cross terms at the retained doses, so the variance
    # degrees of freedom are nu1 + nu2 + k2.
    df_pool = stage1.df + stage2.df + stage2.k
    c2 = interim.stage2_contrasts
    den = np.sqrt(np.sum(c2.coeffs ** 2 / n_p, axis=1))
    stats = _contrast_stats(c2.coeffs, n_p, m_p, den, pooled_var=ss_p / df_pool)
    p = stage_p_value(stats, c2.corr, float(df_pool), CombinationMethod.TIPPETT,
                      seed, qmc_log2=sc.qmc_log2, qmc_shifts=sc.qmc_shifts)
    return bool(p <= sc.alpha)


# ------------------------------------------------------------------ #
# Study driver
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class ReportRow:
    scenario: str
    method: str
    replications: int
    rejections: int
    rejection_rate: float
    ci_low: float
    ci_high: float
    mean_k2: float
    futility_rate: float
    negative_slope_rate: float
    isotonic_fallback_rate: float
    carryover_rate: float
    errors: int


@dataclass
class SimulationReport:
    rows: list
    wall_time: float
    seed_by_scenario: dict

    CSV_HEADER = ("scenario,method,replications,rejections,rejection_rate,"
                  "ci_low,ci_high,mean_k2,futility_rate,negative_slope_rate,"
                  "isotonic_fallback_rate,carryover_rate,errors")

    def to_csv(self, path):
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(",".join([
                r.scenario, r.method, str(r.replications), str(r.rejections),
                repr(r.rejection_rate), repr(r.ci_low), repr(r.ci_high),
                repr(r.mean_k2), repr(r.futility_rate), repr(r.negative_slope_rate),
                repr(r.isotonic_fallback_rate), repr(r.carryover_rate), str(r.errors),
            ]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


_WORKER_SCENARIO: dict = {}


def _worker_init(scenarios):
    # With fork start method the parent caches are inherited; rebuilding is
    # only needed under spawn, and is deterministic either way.
    for sc in scenarios:
        _WORKER_SCENARIO[sc.name] = sc


def _worker_chunk(args):
    name, lo, hi = args
    sc = _WORKER_SCENARIO[name]
    tb = _tables_for(sc)
    return [(_run_replicate(tb, rep)) for rep in range(lo, hi)]


def run_study(scenarios, parallelism: int | None = None,
              error_budget: float = 1e-3) -> SimulationReport:
    """Run every scenario and aggregate a deterministic report.

    Records are reduced in replicate order regardless of how chunks are
    scheduled, so the report is bit-identical for any ``parallelism``.
    A scenario aborts (RuntimeError) if more than ``error_budget`` of
    its replicates raise.
    """
    scenarios = list(scenarios)
    if parallelism is None:
        parallelism = default_thread_count()
    t0 = time.time()
    rows: list = []
    seeds = {}
    for sc in scenarios:
        seeds[sc.name] = sc.seed
        records = _collect_records(sc, parallelism)
        n_err = sum(1 for r in records if r.error is not None)
        if n_err > error_budget * sc.replications:
            examples = [r.error for r in records if r.error][:3]
            raise RuntimeError(
                f"scenario {sc.name}: {n_err} failed replicates (> {error_budget:.1%}); "
                f"first errors: {examples}")
        ok = [r for r in records if r.error is None]
        n_ok = len(ok)
        completed = [r for r in ok if not r.futility]
        for mid in sc.methods:
            rej = sum(r.rejects[mid] for r in ok)
            rate = rej / n_ok if n_ok else float("nan")
            half = 1.959963984540054 * math.sqrt(max(rate * (1 - rate), 0.0) / n_ok) if n_ok else float("nan")
            rows.append(ReportRow(
                scenario=sc.name, method=mid, replications=n_ok, rejections=rej,
                rejection_rate=rate, ci_low=rate - half, ci_high=rate + half,
                mean_k2=(sum(r.k2 for r in completed) / len(completed)) if completed else float("nan"),
                futility_rate=sum(r.futility for r in ok) / n_ok if n_ok else float("nan"),
                negative_slope_rate=sum(r.negative_slope for r in ok) / n_ok if n_ok else float("nan"),
                isotonic_fallback_rate=sum(r.n_isotonic > 0 for r in ok) / n_ok if n_ok else float("nan"),
                carryover_rate=sum(r.n_carryover > 0 for r in ok) / n_ok if n_ok else float("nan"),
                errors=n_err,
            ))
    return SimulationReport(rows=rows, wall_time=time.time() - t0, seed_by_scenario=seeds)


def _collect_records(sc: SimulationScenario, parallelism: int):
    _tables_for(sc)  # build in the parent so forked workers inherit it
    reps = sc.replications
    if parallelism <= 1 or reps < 64:
        tb = _tables_for(sc)
        return [_run_replicate(tb, rep) for rep in range(reps)]
    chunk = max(16, reps // (parallelism * 8))
    tasks = [(sc.name, lo, min(lo + chunk, reps)) for lo in range(0, reps, chunk)]
    records: list = [None] * reps
    with ProcessPoolExecutor(max_workers=parallelism, initializer=_worker_init,
                             initargs=([sc],)) as pool:
        for (name, lo, hi), out in zip(tasks, pool.map(_worker_chunk, tasks)):
            records[lo:hi] = out
    return records


def collect_trial_records(scenario: SimulationScenario,
                          parallelism: int | None = None):
    """Raw per-replicate records (for diagnostics and property checks)."""
    if parallelism is None:
        parallelism = default_thread_count()
    return _collect_records(scenario, parallelism)
