"""Command-line front end.

Subcommands:

``analyze``
    Run the configured two-stage test on a ``stage,dose,response`` CSV.
``simulate``
    Run simulation studies (config-driven or via the built-in null
    table / power presets) and write CSV reports.
``models list``
    Print the model family catalog and built-in parameterizations.
``contrasts show``
    Print the stage-1 optimal contrasts and their correlation matrix
    for a configured design.

Exit codes: 0 success, 2 data or configuration error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .adapt import stage2_group_sizes
from .analyze import (
    AnalysisConfig,
    ConfigError,
    DataError,
    analyze_two_stage,
    load_config,
    load_subjects,
    render_text_report,
    synthesize_subjects,
)
from .contrasts import contrasts_for_models
from .gmct import DegenerateVariance
from .models import (
    PARAM_COUNT,
    DoseResponseModel,
    ModelFamily,
    StageSummary,
    default_candidates,
    evaluate,
    true_model,
    TRUE_MODEL_NAMES,
)
from .mvprob import NumericalDomainError
from .rngstream import substream, substream_seed
from .simulate import (
    DEFAULT_TABLE_METHODS,
    SimulationScenario,
    _P_ANALYSIS,
    _P_STAGE1,
    _P_STAGE2,
    _T_S1_KNOWN,
    _T_S1_UNKNOWN,
    _T_TIP_GRID,
    _draw_stage,
    _tables_for,
    default_thread_count,
    run_study,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DegenerateVariance, NumericalDomainError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptmct",
                                description="Two-stage adaptive dose-response PoC tests")
    p.add_argument("--version", action="version", version=f"adaptmct {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="analyze a two-stage dataset")
    pa.add_argument("data", help="CSV file with header stage,dose,response")
    pa.add_argument("--config", required=True, help="JSON configuration")
    pa.add_argument("--out", help="write the JSON report here")
    pa.add_argument("--quiet", action="store_true", help="suppress the text report")
    pa.set_defaults(func=cmd_analyze)

    ps = sub.add_parser("simulate", help="run simulation studies")
    ps.add_argument("--config", help="JSON configuration with a simulation section")
    ps.add_argument("--out-dir", required=True)
    ps.add_argument("--threads", type=int, default=None,
                    help="worker processes (default: ADAPTMCT_THREADS or all cores)")
    ps.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    ps.add_argument("--replications", type=int, default=None)
    ps.add_argument("--paper-tables", action="store_true",
                    help="null rejection-rate tables for the built-in design")
    ps.add_argument("--n-grid", default=None,
                    help="comma-separated per-stage totals (default 60,120)")
    ps.add_argument("--true-model", action="append", default=None,
                    metavar="NAME", help=f"power run for a generating model; one of "
                                         f"{', '.join(TRUE_MODEL_NAMES)}")
    ps.add_argument("--n", type=int, default=None,
                    help="per-stage total for --true-model runs (default 120)")
    ps.add_argument("--dump-one-replicate", type=int, default=None, metavar="IDX",
                    help="export one replicate as CSV + config + decisions")
    ps.add_argument("--dump-method", default="agmct-n-adaptive-unknown",
                    help="method whose analysis settings the dumped config carries")
    ps.set_defaults(func=cmd_simulate)

    pm = sub.add_parser("models", help="model catalog utilities")
    pm_sub = pm.add_subparsers(dest="models_command", required=True)
    pml = pm_sub.add_parser("list", help="list supported families and built-ins")
    pml.set_defaults(func=cmd_models_list)

    pc = sub.add_parser("contrasts", help="contrast utilities")
    pc_sub = pc.add_subparsers(dest="contrasts_command", required=True)
    pcs = pc_sub.add_parser("show", help="show stage-1 contrasts for a config")
    pcs.add_argument("--config", required=True)
    pcs.add_argument("--n1", type=int, default=None,
                     help="stage-1 total (default: equal groups of 1)")
    pcs.add_argument("--json", action="store_true")
    pcs.set_defaults(func=cmd_contrasts_show)
    return p


# --------------------------------------------------------------------- #
# analyze
# --------------------------------------------------------------------- #

def cmd_analyze(args) -> int:
    config = load_config(args.config)
    rows = load_subjects(args.data)
    report = analyze_two_stage(rows, config)
    text = render_text_report(report)
    if not args.quiet:
        print(text, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


# --------------------------------------------------------------------- #
# simulate
# --------------------------------------------------------------------- #

def cmd_simulate(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    threads = args.threads if args.threads is not None else default_thread_count()
    scenarios = _scenarios_from_args(args)
    if args.dump_one_replicate is not None:
        if len(scenarios) != 1:
            raise ConfigError("--dump-one-replicate needs exactly one scenario; "
                              "narrow the run (e.g. a single --true-model and --n)")
        return _dump_replicate(scenarios[0], args.dump_one_replicate,
                               args.dump_method, args.out_dir)

    report = run_study(scenarios, parallelism=threads)
    raw_path = os.path.join(args.out_dir, "report_raw.csv")
    report.to_csv(raw_path)
    files = ["report_raw.csv"]
    if args.paper_tables:
        files += _write_null_tables(report, scenarios, args.out_dir)
    power_models = _power_models(args)
    if power_models:
        files += _write_power_tables(report, scenarios, args.out_dir)
    _write_manifest(args.out_dir, scenarios, files)
    print(f"wrote {', '.join(files + ['manifest.json'])} to {args.out_dir} "
          f"({report.wall_time:.1f}s)")
    return EXIT_OK


def _power_models(args):
    return list(args.true_model or ())


def _scenarios_from_args(args):
    reps = args.replications
    scenarios = []
    if args.config:
        config = load_config(args.config)
        if config.simulation is None:
            raise ConfigError("configuration has no simulation section")
        scenarios += _scenarios_from_config(config, args)
    if args.paper_tables:
        n_grid = _parse_n_grid(args.n_grid, default=(60, 120))
        seed = args.seed if args.seed is not None else 1
        for n in n_grid:
            scenarios.append(SimulationScenario(
                name=f"null-n{n}", true_model=true_model("flat"),
                n1_total=n, n2_total=n, replications=reps or 10_000, seed=seed))
    for name in _power_models(args):
        n = args.n or 120
        seed = args.seed if args.seed is not None else 1
        scenarios.append(SimulationScenario(
            name=f"power-{name}-n{n}", true_model=true_model(name),
            n1_total=n, n2_total=n, replications=reps or 10_000, seed=seed))
    if not scenarios:
        raise ConfigError("nothing to simulate: pass --config, --paper-tables or "
                          "--true-model")
    return scenarios


def _scenarios_from_config(config: AnalysisConfig, args):
    sim = dict(config.simulation)
    tm = sim.get("true_model", "flat")
    if isinstance(tm, dict):
        model = DoseResponseModel(ModelFamily.from_tag(tm["family"]), tuple(tm["theta"]))
        tm_name = tm["family"]
    else:
        model = true_model(tm)
        tm_name = str(tm)
    seed = args.seed if args.seed is not None else int(sim.get("seed", 0))
    reps = args.replications or int(sim.get("replications", 10_000))
    methods = tuple(sim.get("methods", DEFAULT_TABLE_METHODS))
    n_list = sim.get("n_grid") or [sim.get("n1", 120)]
    out = []
    for n1 in n_list:
        n2 = int(sim.get("n2", n1))
        out.append(SimulationScenario(
            name=f"{tm_name}-n{n1}", true_model=model,
            doses=tuple(float(d) for d in config.doses),
            candidates=config.candidates,
            sigma=float(sim.get("sigma", 1.478)),
            n1_total=int(n1), n2_total=n2, alpha=config.alpha, methods=methods,
            adaptation=config.adaptation,
            across_stage=config.across_stage.value,
            replications=reps, seed=seed,
            stage2_draws=int(sim.get("stage2_draws", 4_095)),
        ))
    return out


def _parse_n_grid(text, default):
    if not text:
        return default
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--n-grid must be comma-separated integers: {text!r}") from exc


def _rate_for(report, scenario_name, method):
    for row in report.rows:
        if row.scenario == scenario_name and row.method == method:
            return row.rejection_rate
    return float("nan")


def _write_null_tables(report, scenarios, out_dir):
    nulls = [sc for sc in scenarios if sc.name.startswith("null-n")]
    files = []
    known_cols = [("agmct_t", "agmct-t-{d}-known"), ("agmct_f", "agmct-f-{d}-known"),
                  ("agmct_n", "agmct-n-{d}-known"), ("amct", "amct-{d}-known")]
    unknown_cols = [("agmct_t", "agmct-t-{d}-unknown"), ("agmct_f", "agmct-f-{d}-unknown"),
                    ("agmct_n", "agmct-n-{d}-unknown")]
    for fname, cols in (("typeI_known.csv", known_cols), ("typeI_unknown.csv", unknown_cols)):
        lines = ["n,design," + ",".join(c for c, _ in cols)]
        for sc in nulls:
            n = sc.n1_total
            for design in ("adaptive", "nonadaptive"):
                cells = [repr(_rate_for(report, sc.name, pat.format(d=design)))
                         for _, pat in cols]
                lines.append(f"{n},{design}," + ",".join(cells))
        path = os.path.join(out_dir, fname)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        files.append(fname)
    return files


def _write_power_tables(report, scenarios, out_dir):
    files = []
    by_model: dict = {}
    for sc in scenarios:
        if sc.name.startswith("power-"):
            model = sc.name[len("power-"):].rsplit("-n", 1)[0]
            by_model.setdefault(model, []).append(sc)
    for model, scs in by_model.items():
        methods = list(scs[0].methods)
        lines = ["n," + ",".join(methods)]
        for sc in sorted(scs, key=lambda s: s.n1_total):
            cells = [repr(_rate_for(report, sc.name, m)) for m in methods]
            lines.append(f"{sc.n1_total}," + ",".join(cells))
        fname = f"power_{model}.csv"
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        files.append(fname)
    return files


def _scenario_fingerprint(sc: SimulationScenario) -> dict:
    return {
        "name": sc.name,
        "true_model": {"family": sc.true_model.family.value, "theta": list(sc.true_model.theta)},
        "doses": list(sc.doses),
        "candidates": [{"family": c.family.value, "theta": list(c.theta)}
                       for c in sc.candidates],
        "sigma": sc.sigma, "n1_total": sc.n1_total, "n2_total": sc.n2_total,
        "alpha": sc.alpha, "methods": list(sc.methods),
        "delta": sc.adaptation.delta if not isinstance(sc.adaptation.delta, str)
        else sc.adaptation.delta,
        "model_policy": sc.adaptation.model_policy.value,
        "across_stage": sc.across_stage, "replications": sc.replications,
        "seed": sc.seed, "table_draws": sc.table_draws,
        "stage2_draws": sc.stage2_draws, "qmc_log2": sc.qmc_log2,
        "qmc_shifts": sc.qmc_shifts,
    }


def _write_manifest(out_dir, scenarios, files):
    doc = {
        "tool": f"adaptmct {__version__}",
        "versions": {"numpy": np.__version__,
                     "scipy": __import__("scipy").__version__},
        "scenarios": [_scenario_fingerprint(sc) for sc in scenarios],
        "files": sorted(files),
    }
    blob = json.dumps(doc["scenarios"], sort_keys=True).encode()
    doc["config_sha256"] = hashlib.sha256(blob).hexdigest()
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------- #
# dump-one-replicate (round-trip support)
# --------------------------------------------------------------------- #

def _dump_replicate(sc: SimulationScenario, rep: int, method_id: str, out_dir: str) -> int:
    if method_id not in set(sc.methods):
        raise ConfigError(f"--dump-method {method_id!r} is not in the scenario methods")
    tb = _tables_for(sc)
    doses = np.asarray(sc.doses)
    ybar1, ss1 = _draw_stage(substream(sc.seed, _P_STAGE1, rep), tb.mu1, tb.n1, sc.sigma)
    stage1 = StageSummary(doses, tb.n1, ybar1, ss1)
    from .adapt import run_interim

    interim = run_interim(stage1, sc.candidates, sc.n2_total, sc.adaptation,
                          tb.contrasts1)
    rows = synthesize_subjects(stage1, 1)
    if not interim.futility_stop:
        retained = interim.retained_doses
        n2 = stage2_group_sizes(sc.n2_total, retained.size)
        mu2 = np.asarray(evaluate(sc.true_model, retained), dtype=float)
        ybar2, ss2 = _draw_stage(substream(sc.seed, _P_STAGE2, rep), mu2, n2, sc.sigma)
        rows += synthesize_subjects(StageSummary(retained, n2, ybar2, ss2), 2)

    ana = substream(sc.seed, _P_ANALYSIS, rep)
    seeds = {name: int(s) for name, s in zip(
        ("s1k", "s1u", "s2k", "s2u", "tip2k", "tip2u", "amctk", "amctu", "pool"),
        ana.integers(2 ** 63, size=9))}
    config_doc = _dump_config(sc, method_id, seeds)

    data_path = os.path.join(out_dir, f"replicate-{rep}-data.csv")
    with open(data_path, "w", encoding="utf-8") as fh:
        fh.write("stage,dose,response\n")
        for st, d, y in rows:
            fh.write(f"{st},{d},{y!r}\n")
    config_path = os.path.join(out_dir, f"replicate-{rep}-config.json")
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(config_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")

    # The canonical in-process decision: the analysis pipeline applied to
    # the in-memory replicate (identical to analyzing the written files).
    report = analyze_two_stage(rows, load_config(config_doc))
    decisions_path = os.path.join(out_dir, f"replicate-{rep}-decisions.json")
    with open(decisions_path, "w", encoding="utf-8") as fh:
        json.dump({"replicate": rep, "method": method_id, "report": report},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {os.path.basename(data_path)}, {os.path.basename(config_path)}, "
          f"{os.path.basename(decisions_path)}")
    return EXIT_OK


def _dump_config(sc: SimulationScenario, method_id: str, seeds: dict) -> dict:
    parts = method_id.split("-")
    calibration: dict = {"qmc_log2": sc.qmc_log2, "qmc_shifts": sc.qmc_shifts}
    if method_id.startswith("amct"):
        variance = parts[-1]
        amct_seed = seeds["amctk" if variance == "known" else "amctu"]
        method = {"test": "amct", "variance": variance, "sigma": sc.sigma,
                  "calibration": {**calibration, "amct_seed": amct_seed}}
    else:
        combiner = {"t": "tippett", "f": "fisher", "n": "inverse-normal"}[parts[1]]
        variance = parts[-1]
        calibration.update({
            "draws_stage1": sc.table_draws,
            "draws_stage2": sc.stage2_draws,
            "stage1_seed": substream_seed(
                sc.seed, _T_S1_KNOWN if variance == "known" else _T_S1_UNKNOWN),
            "stage2_seed": seeds["s2k" if variance == "known" else "s2u"],
            "tippett_seed_stage1": substream_seed(sc.seed, _T_TIP_GRID),
            "tippett_seed_stage2": seeds["tip2k" if variance == "known" else "tip2u"],
        })
        method = {"test": "agmct", "within_stage": combiner,
                  "across_stage": sc.across_stage, "variance": variance,
                  "sigma": sc.sigma if variance == "known" else None,
                  "calibration": calibration}
    return {
        "design": {"doses": list(sc.doses), "alpha": sc.alpha},
        "candidates": [{"family": c.family.value, "theta": list(c.theta)}
                       for c in sc.candidates],
        "adaptation": {"delta": sc.adaptation.delta,
                       "model_policy": sc.adaptation.model_policy.value},
        "method": method,
    }


# --------------------------------------------------------------------- #
# models / contrasts
# --------------------------------------------------------------------- #

def cmd_models_list(args) -> int:
    print("Supported model families (theta layout -> arity):")
    for fam in ModelFamily:
        print(f"  {fam.value:20s} {PARAM_COUNT[fam]}")
    print("\nDefault candidate set:")
    for m in default_candidates():
        print(f"  {m.family.value:20s} theta={tuple(round(t, 6) for t in m.theta)}")
    print("\nBuilt-in generating models (for simulation):")
    for name in TRUE_MODEL_NAMES:
        m = true_model(name)
        print(f"  {name:20s} {m.family.value:20s} "
              f"theta={tuple(round(t, 6) for t in m.theta)}")
    return EXIT_OK


def cmd_contrasts_show(args) -> int:
    config = load_config(args.config)
    k = config.doses.size
    n1 = stage2_group_sizes(args.n1, k) if args.n1 else np.ones(k, dtype=int)
    cs = contrasts_for_models(config.candidates, config.doses, n1)
    if args.json:
        doc = {"doses": config.doses.tolist(), "n": n1.tolist(),
               "contrasts": [[round(float(v), 6) for v in row] for row in cs.coeffs],
               "correlation": [[round(float(v), 6) for v in row] for row in cs.corr]}
        print(json.dumps(doc, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"design doses: {config.doses.tolist()}   allocation: {n1.tolist()}")
    print("optimal contrasts (rows follow the candidate order):")
    for m, row in zip(config.candidates, cs.coeffs):
        label = m.family.value
        print(f"  {label:20s} " + "  ".join(f"{v:8.4f}" for v in row))
    print("correlation matrix:")
    for row in cs.corr:
        print("  " + "  ".join(f"{v:7.4f}" for v in row))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
