"""End-to-end analysis of a two-stage dataset: configuration, data
loading, and the full test pipeline.

Data format: CSV with header ``stage,dose,response``; stage is 1 or 2.
Doses are matched by canonical decimal string (trailing zeros trimmed)
so that ``0.20`` and ``0.2`` are the same group and no float-keying
drift can occur.

Configuration: one JSON document with sections ``design``,
``candidates``, ``adaptation``, ``method`` and (for simulation runs)
``simulation``.  Unknown keys anywhere are errors: a strict schema
protects a statistical procedure from silently ignored options.
"""

from __future__ import annotations

from dataclasses import dataclass
import csv
import json
import math

import numpy as np

from .adapt import SE_RULE, AdaptationConfig, ModelPolicy, run_interim
from .amct import BaseTestSpec, amct_known_variance, amct_unknown_variance
from .contrasts import contrasts_for_models
from .gmct import CombinationMethod, combine_across, run_gmct_stage
from .models import DoseResponseModel, ModelFamily, StageSummary
from .rngstream import substream_seed

__all__ = [
    "ConfigError",
    "DataError",
    "AnalysisConfig",
    "load_config",
    "load_subjects",
    "analyze_two_stage",
    "synthesize_subjects",
    "canonical_dose",
]


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


class DataError(ValueError):
    """Invalid subject-level data."""


def canonical_dose(text) -> str:
    """Canonical decimal string for a dose label (trim trailing zeros)."""
    s = str(text).strip()
    try:
        f = float(s)
    except ValueError as exc:
        raise DataError(f"dose {text!r} is not numeric") from exc
    if not math.isfinite(f) or f < 0:
        raise DataError(f"dose {text!r} must be finite and nonnegative")
    out = f"{f:.12f}".rstrip("0").rstrip(".")
    return out if out else "0"


# --------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------- #

_TOP_KEYS = {"design", "candidates", "adaptation", "method", "simulation"}
_DESIGN_KEYS = {"doses", "alpha"}
_ADAPT_KEYS = {"delta", "model_policy"}
_METHOD_KEYS = {"test", "within_stage", "across_stage", "variance", "sigma",
                "seed", "calibration_draws", "calibration"}
_CALIB_KEYS = {"stage1_seed", "stage2_seed", "tippett_seed_stage1",
               "tippett_seed_stage2", "amct_seed", "qmc_log2", "qmc_shifts",
               "draws_stage1", "draws_stage2"}
_SIM_KEYS = {"true_model", "n1", "n2", "replications", "methods", "seed",
             "sigma", "n_grid", "stage2_draws"}
_CAND_KEYS = {"family", "theta"}


def _check_keys(section: dict, allowed: set, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}; "
                          f"allowed: {sorted(allowed)}")


@dataclass
class AnalysisConfig:
    doses: np.ndarray
    alpha: float
    candidates: tuple
    adaptation: AdaptationConfig
    test: str                      # "agmct" | "amct"
    within_stage: CombinationMethod
    across_stage: CombinationMethod
    variance: str                  # "known" | "unknown"
    sigma: float | None
    seed: int
    calibration_draws: int
    calibration: dict
    simulation: dict | None

    def seed_for(self, purpose: str, default_path: int) -> int:
        if purpose in self.calibration:
            return int(self.calibration[purpose])
        return substream_seed(self.seed, default_path)

    def draws_for(self, stage: int) -> int:
        return int(self.calibration.get(f"draws_stage{stage}", self.calibration_draws))


def load_config(path_or_dict) -> AnalysisConfig:
    """Parse and strictly validate a configuration document."""
    if isinstance(path_or_dict, dict):
        raw = path_or_dict
    else:
        with open(path_or_dict, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    _check_keys(raw, _TOP_KEYS, "configuration")
    for req in ("design", "candidates", "adaptation", "method"):
        if req not in raw:
            raise ConfigError(f"missing required section {req!r}")

    design = raw["design"]
    _check_keys(design, _DESIGN_KEYS, "design")
    doses = np.asarray([float(d) for d in design.get("doses", ())], dtype=float)
    if doses.size < 2 or doses[0] != 0.0 or np.any(np.diff(doses) <= 0):
        raise ConfigError("design.doses must start at 0 and increase strictly")
    alpha = float(design.get("alpha", 0.05))
    if not 0.0 < alpha < 1.0:
        raise ConfigError("design.alpha must be in (0, 1)")

    cands = []
    for i, c in enumerate(raw["candidates"]):
        _check_keys(c, _CAND_KEYS, f"candidates[{i}]")
        try:
            cands.append(DoseResponseModel(ModelFamily.from_tag(c["family"]),
                                           tuple(c["theta"])))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"candidates[{i}]: {exc}") from exc
    if not cands:
        raise ConfigError("candidates must be a non-empty list")

    ad = raw["adaptation"]
    _check_keys(ad, _ADAPT_KEYS, "adaptation")
    delta = ad.get("delta", 0.0)
    if isinstance(delta, str) and delta != SE_RULE:
        raise ConfigError(f"adaptation.delta must be a number or '{SE_RULE}'")
    try:
        adaptation = AdaptationConfig(
            delta=delta,
            model_policy=ModelPolicy(ad.get("model_policy", "refit-with-fallbacks")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    meth = raw["method"]
    _check_keys(meth, _METHOD_KEYS, "method")
    test = meth.get("test", "agmct")
    if test not in ("agmct", "amct"):
        raise ConfigError("method.test must be 'agmct' or 'amct'")
    variance = meth.get("variance", "unknown")
    if variance not in ("known", "unknown"):
        raise ConfigError("method.variance must be 'known' or 'unknown'")
    sigma = meth.get("sigma")
    if sigma is not None:
        sigma = float(sigma)
        if sigma <= 0:
            raise ConfigError("method.sigma must be positive")
    if variance == "known" and sigma is None:
        raise ConfigError("method.variance='known' requires method.sigma")
    if test == "amct" and sigma is None:
        raise ConfigError("the adaptive multiple contrast test requires method.sigma "
                          "(the reference value at which the conditional error is "
                          "evaluated in the unknown-variance case)")
    try:
        within = CombinationMethod.from_tag(meth.get("within_stage", "tippett"))
        across = CombinationMethod.from_tag(meth.get("across_stage", "inverse-normal"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if across is CombinationMethod.TIPPETT:
        raise ConfigError("method.across_stage must be 'fisher' or 'inverse-normal'")
    calibration = meth.get("calibration", {})
    _check_keys(calibration, _CALIB_KEYS, "method.calibration")

    sim = raw.get("simulation")
    if sim is not None:
        _check_keys(sim, _SIM_KEYS, "simulation")

    return AnalysisConfig(
        doses=doses, alpha=alpha, candidates=tuple(cands), adaptation=adaptation,
        test=test, within_stage=within, across_stage=across, variance=variance,
        sigma=sigma, seed=int(meth.get("seed", 0)),
        calibration_draws=int(meth.get("calibration_draws", 200_000)),
        calibration=dict(calibration), simulation=sim,
    )


# --------------------------------------------------------------------- #
# Data
# --------------------------------------------------------------------- #

def load_subjects(path):
    """Read ``stage,dose,response`` records; returns (stage, dose-str, y) rows."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["stage", "dose", "response"]:
            raise DataError("data file must have header 'stage,dose,response'")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != 3:
                raise DataError(f"line {lineno}: expected 3 fields, got {len(rec)}")
            stage_s, dose_s, resp_s = (f.strip() for f in rec)
            if stage_s not in ("1", "2"):
                raise DataError(f"line {lineno}: stage must be 1 or 2, got {stage_s!r}")
            try:
                resp = float(resp_s)
            except ValueError as exc:
                raise DataError(f"line {lineno}: response {resp_s!r} not numeric") from exc
            rows.append((int(stage_s), canonical_dose(dose_s), resp))
    if not rows:
        raise DataError("data file contains no records")
    return rows


def _stage_summary(rows, stage: int, dose_order) -> StageSummary:
    by_dose: dict = {}
    for st, d, y in rows:
        if st == stage:
            by_dose.setdefault(d, []).append(y)
    if not by_dose:
        raise DataError(f"no stage-{stage} records")
    doses, ns, means, ss = [], [], [], 0.0
    for d in dose_order:
        if d not in by_dose:
            continue
        ys = np.asarray(by_dose.pop(d))
        doses.append(float(d))
        ns.append(ys.size)
        means.append(float(ys.mean()))
        ss += float(np.sum((ys - ys.mean()) ** 2))
    if by_dose:
        raise DataError(f"stage-{stage} dose(s) {sorted(by_dose)} not in the design")
    if not doses or doses[0] != 0.0:
        raise DataError(f"stage-{stage} data has no placebo (dose 0) group")
    return StageSummary(np.asarray(doses), np.asarray(ns, dtype=int),
                        np.asarray(means), ss)


def synthesize_subjects(summary: StageSummary, stage: int):
    """Subject rows reproducing the summary's means and pooled SS exactly.

    The within-group sum of squares is split over groups proportionally
    to their degrees of freedom and realized through a fixed two-point
    zero-sum pattern, so any valid summary maps to a concrete dataset.
    """
    rows = []
    total_df = summary.df
    for d, n, m in zip(summary.doses, summary.n, summary.means):
        n = int(n)
        share = summary.ss_within * (n - 1) / total_df if total_df > 0 else 0.0
        ys = np.full(n, float(m))
        if n >= 2 and share > 0:
            delta = math.sqrt(share / 2.0)
            ys[0] += delta
            ys[1] -= delta
        rows.extend((stage, canonical_dose(d), float(y)) for y in ys)
    return rows


# --------------------------------------------------------------------- #
# Pipeline
# --------------------------------------------------------------------- #

# Default seed-derivation paths for the analysis pipeline.
_PATH_S1, _PATH_S2, _PATH_TIP1, _PATH_TIP2, _PATH_AMCT = 11, 12, 13, 14, 15


def analyze_two_stage(rows, config: AnalysisConfig) -> dict:
    """Run the configured two-stage test on subject-level records.

    Returns a JSON-serializable report with stage-wise contrasts,
    statistics, p-values, the interim decision with per-model
    provenance, and either the combined p-value (AGMCT) or the
    conditional-rejection-probability diagnostics (AMCT).

    Raises
    ------
    DataError
        Missing placebo, stage-2 doses outside the design, or stage-2
        doses inconsistent with the interim rule.
    """
    dose_order = [canonical_dose(d) for d in config.doses]
    stage1 = _stage_summary(rows, 1, dose_order)
    if stage1.k != len(dose_order):
        missing = sorted(set(dose_order) - {canonical_dose(d) for d in stage1.doses})
        raise DataError(f"stage-1 data missing dose group(s) {missing}")

    contrasts1 = contrasts_for_models(config.candidates, stage1.doses, stage1.n)
    interim = run_interim(stage1, config.candidates, max(stage1.k, 2),
                          config.adaptation, contrasts1)
    report: dict = {
        "design": {"doses": [float(d) for d in config.doses], "alpha": config.alpha},
        "stage1": {
            "n": stage1.n.tolist(),
            "means": _round_list(stage1.means),
            "pooled_sd": round(math.sqrt(stage1.pooled_variance()), 6),
            "contrasts": _round_matrix(contrasts1.coeffs),
            "correlation": _round_matrix(contrasts1.corr),
        },
        "interim": {
            "futility_stop": interim.futility_stop,
            "retained_doses": [float(d) for d in interim.retained_doses],
            "provenance": [p.value for p in interim.provenance],
            "notes": list(interim.notes),
        },
    }

    has_stage2 = any(st == 2 for st, _, _ in rows)
    stage2 = None
    if interim.futility_stop:
        if has_stage2:
            raise DataError("data contains stage-2 records but the interim rule "
                            "stops the trial for futility")
    else:
        if not has_stage2:
            raise DataError("interim rule continues the trial but the data has no "
                            "stage-2 records")
        stage2 = _stage_summary(rows, 2, dose_order)
        retained = {canonical_dose(d) for d in interim.retained_doses}
        observed = {canonical_dose(d) for d in stage2.doses}
        if observed != retained:
            raise DataError(
                f"stage-2 dose groups {sorted(observed)} do not match the interim "
                f"decision {sorted(retained)} under delta={config.adaptation.delta}")
        # Contrasts were built for the configured second-stage allocation;
        # rebuild them for the observed one if it differs.
        interim = run_interim(stage1, config.candidates, int(stage2.n.sum()),
                              config.adaptation, contrasts1)
        report["interim"]["provenance"] = [p.value for p in interim.provenance]
        report["stage2"] = {
            "n": stage2.n.tolist(),
            "means": _round_list(stage2.means),
            "pooled_sd": round(math.sqrt(stage2.pooled_variance()), 6),
            "contrasts": _round_matrix(interim.stage2_contrasts.coeffs),
        }

    if config.test == "agmct":
        report["agmct"] = _agmct_section(config, stage1, stage2, contrasts1, interim)
        report["reject"] = report["agmct"]["reject"]
    else:
        report["amct"] = _amct_section(config, stage1, stage2, contrasts1, interim)
        report["reject"] = report["amct"]["reject"]
    return report


def _agmct_section(config, stage1, stage2, contrasts1, interim) -> dict:
    sigma = config.sigma if config.variance == "known" else None
    qmc_kw = _qmc_kwargs(config)
    tippett = config.within_stage is CombinationMethod.TIPPETT
    seed1 = (config.seed_for("tippett_seed_stage1", _PATH_TIP1) if tippett
             else config.seed_for("stage1_seed", _PATH_S1))
    r1 = run_gmct_stage(stage1, contrasts1, config.within_stage, seed=seed1,
                        sigma=sigma, draws=config.draws_for(1), **qmc_kw)
    out = {
        "variance": config.variance,
        "within_stage": config.within_stage.value,
        "across_stage": config.across_stage.value,
        "stage1": {"t_stats": _round_list(r1.t_stats), "raw_p": _round_list(r1.raw_p),
                   "psi": round(r1.psi, 6), "p": round(r1.stage_p, 6)},
    }
    if interim.futility_stop:
        out["reject"] = False
        out["overall_p"] = None
        return out
    seed2 = (config.seed_for("tippett_seed_stage2", _PATH_TIP2) if tippett
             else config.seed_for("stage2_seed", _PATH_S2))
    r2 = run_gmct_stage(stage2, interim.stage2_contrasts, config.within_stage,
                        seed=seed2, sigma=sigma, draws=config.draws_for(2),
                        **qmc_kw)
    psi, overall = combine_across(r1.stage_p, r2.stage_p, config.across_stage)
    out["stage2"] = {"t_stats": _round_list(r2.t_stats), "raw_p": _round_list(r2.raw_p),
                     "psi": round(r2.psi, 6), "p": round(r2.stage_p, 6)}
    out["combination_psi"] = round(psi, 6)
    out["overall_p"] = round(overall, 8)
    out["reject"] = bool(overall <= config.alpha)
    return out


def _amct_section(config, stage1, stage2, contrasts1, interim) -> dict:
    base = BaseTestSpec.from_stage1(contrasts1)
    seed = config.seed_for("amct_seed", _PATH_AMCT)
    if config.variance == "known":
        res = amct_known_variance(stage1, stage2, base, interim, config.sigma,
                                  config.alpha, seed, **_qmc_kwargs(config))
        crit_name = "u"
    else:
        res = amct_unknown_variance(stage1, stage2, base, interim, config.sigma,
                                    config.alpha, seed)
        crit_name = "c"
    out = {
        "variance": config.variance,
        "sigma_ref": config.sigma,
        f"{crit_name}_star": round(res.state.base_critical, 6),
        "conditional_error": round(res.state.conditional_error, 6),
        f"{crit_name}_tilde": (None if math.isnan(res.state.adaptive_critical)
                               else round(res.state.adaptive_critical, 6)),
        "reject": bool(res.reject),
    }
    if res.stats is not None:
        out["combined_stats"] = _round_list(res.stats)
    if res.state.adapted_cov is not None:
        out["adapted_covariance"] = _round_matrix(res.state.adapted_cov)
    return out


def _qmc_kwargs(config) -> dict:
    kw = {}
    if "qmc_log2" in config.calibration:
        kw["qmc_log2"] = int(config.calibration["qmc_log2"])
        kw["qmc_shifts"] = int(config.calibration.get("qmc_shifts", 8))
    return kw


def _round_list(arr, nd: int = 6):
    return [round(float(v), nd) for v in np.asarray(arr, dtype=float)]


def _round_matrix(mat, nd: int = 6):
    return [_round_list(row, nd) for row in np.asarray(mat, dtype=float)]


def render_text_report(report: dict) -> str:
    """Aligned human-readable rendering of an analysis report."""
    lines = []
    add = lines.append
    add("Two-stage dose-response proof-of-concept analysis")
    add("=" * 50)
    add(f"doses: {report['design']['doses']}   alpha: {report['design']['alpha']}")
    s1 = report["stage1"]
    add("")
    add("Stage 1")
    add(f"  n:     {s1['n']}")
    add(f"  means: {s1['means']}")
    add(f"  pooled sd: {s1['pooled_sd']}")
    add("  contrasts (one row per candidate):")
    for row in s1["contrasts"]:
        add("    " + "  ".join(f"{v:8.4f}" for v in row))
    it = report["interim"]
    add("")
    add("Interim decision")
    if it["futility_stop"]:
        add("  futility stop: all active doses below placebo by more than delta")
    else:
        add(f"  retained doses: {it['retained_doses']}")
        add(f"  contrast provenance: {it['provenance']}")
    if "stage2" in report:
        s2 = report["stage2"]
        add("")
        add("Stage 2")
        add(f"  n:     {s2['n']}")
        add(f"  means: {s2['means']}")
        add(f"  pooled sd: {s2['pooled_sd']}")
        add("  contrasts:")
        for row in s2["contrasts"]:
            add("    " + "  ".join(f"{v:8.4f}" for v in row))
    if "agmct" in report:
        g = report["agmct"]
        add("")
        add(f"AGMCT ({g['within_stage']} within stages, {g['across_stage']} across, "
            f"{g['variance']} variance)")
        add(f"  stage-1 p: {g['stage1']['p']}")
        if "stage2" in g:
            add(f"  stage-2 p: {g['stage2']['p']}")
            add(f"  combination statistic: {g['combination_psi']}")
            add(f"  overall p: {g['overall_p']}")
        add(f"  reject flat-mean null: {'YES' if g['reject'] else 'no'}")
    if "amct" in report:
        a = report["amct"]
        crit = "u" if "u_star" in a else "c"
        add("")
        add(f"AMCT ({a['variance']} variance, conditional rejection probability)")
        add(f"  base critical value:     {a[f'{crit}_star']}")
        add(f"  conditional error A:     {a['conditional_error']}")
        add(f"  adaptive critical value: {a[f'{crit}_tilde']}")
        if "combined_stats" in a:
            add(f"  combined statistics:     {a['combined_stats']}")
        add(f"  reject flat-mean null: {'YES' if a['reject'] else 'no'}")
    return "\n".join(lines) + "\n"
