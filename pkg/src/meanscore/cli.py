"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
(non-convergence, singular information).  Errors are also written to
stderr as a JSON object.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, checks, design
from .cox import cox_fit
from .errors import DataError, EstimationError, MeanScoreError
from .io import (FORMAT_VERSION, as_float, as_int, as_list, load_cohort, read_kv_file, read_mapping,
                 read_row_ids, read_weights, write_allocation, write_json, write_row_ids)
from .mean_score import mean_score_fit
from .model import LinkKind
from .simulation import ScenarioConfig, config_dict, run_scenario
from .strata import build_strata, phase_one_counts

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# simulate

CONFIG_KEYS = {
    "N": as_int, "n": as_int, "censoring_target": as_float, "replications": as_int,
    "master_seed": as_int, "pilot_fraction": as_float, "target_index": as_int,
    "oracle_size": as_int, "surrogate_sd": as_float, "rho": as_float, "link": str,
    "undersample_cap": as_int,
    "estimators": lambda v, k=None: tuple(as_list(v)),
    "alpha_true": lambda v, k=None: tuple(as_float(x, "alpha_true") for x in as_list(v)),
    "beta_true": lambda v, k=None: tuple(as_float(x, "beta_true") for x in as_list(v)),
}


def scenario_from_file(path) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig` from a ``key = value`` file."""
    kv = read_kv_file(path)
    kv.pop("format_version", None)
    unknown = set(kv) - set(CONFIG_KEYS)
    if unknown:
        raise DataError(f"{path}: unknown config keys {sorted(unknown)}")
    args = {}
    for key, raw in kv.items():
        conv = CONFIG_KEYS[key]
        args[key] = conv(raw) if conv is str else conv(raw, key)
    return ScenarioConfig(**args)


def _fmt(x) -> str:
    return repr(float(x))


def cmd_simulate(args) -> int:
    config = scenario_from_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = run_scenario(config, n_jobs=args.jobs)
    with (out / "summary.csv").open("w", newline="") as fh:
        rows = summary.rows()
        w = csv.writer(fh)
        cols = ["estimator", "parameter", "truth", "bias", "sd", "rmse", "successes", "failures",
                "unreliable"]
        w.writerow(cols + ["format_version"])
        for r in rows:
            w.writerow([r["estimator"], r["parameter"], _fmt(r["truth"]), _fmt(r["bias"]), _fmt(r["sd"]),
                        _fmt(r["rmse"]), r["successes"], r["failures"], int(r["unreliable"]),
                        FORMAT_VERSION])
    payload = summary.to_json()
    payload["config"] = config_dict(config)
    write_json(out / "summary.json", payload)
    with (out / "estimates.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        names = list(summary.param_names)
        w.writerow(["replication", "estimator"] + names + [f"se_{p}" for p in names] + ["format_version"])
        for name in summary.estimators:
            est, se = summary.estimates[name], summary.std_errors[name]
            for r in range(summary.replications):
                w.writerow([r, name] + [_fmt(v) for v in est[r]] + [_fmt(v) for v in se[r]] + [FORMAT_VERSION])
    print(json.dumps({"format_version": FORMAT_VERSION, "status": "ok", "out": str(out),
                      "replications": summary.replications, "failures": summary.failures}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# shared loading


def _load(args):
    mapping, spec = read_mapping(args.mapping)
    loaded = load_cohort(args.cohort, mapping, spec)
    for note in loaded.warnings:
        logger.warning(note)
    return loaded


def _target_index(name: str, cohort) -> int:
    names = [f"alpha_{j + 1}" for j in range(cohort.n_times)] + list(cohort.covariate_names)
    if name in names:
        return names.index(name)
    try:
        k = int(name)
    except ValueError:
        raise DataError(f"unknown target {name!r}; choose from {', '.join(names)}") from None
    if not 0 <= k < len(names):
        raise DataError(f"target index {k} outside 0..{len(names) - 1}")
    return k


# ---------------------------------------------------------------------------
# design


def cmd_design(args) -> int:
    loaded = _load(args)
    cohort = loaded.cohort
    counts = phase_one_counts(cohort)
    rng = np.random.default_rng(args.seed)
    report = {"method": args.method, "n": args.n, "strata": len(counts), "cohort_size": cohort.size,
              "dropped_rows": loaded.dropped}
    exclude = None
    if args.pilot_validated is None and args.pilot_n is not None:
        # wave one: the pilot sample itself
        if args.undersample_cap is not None:
            alloc = design.undersampled_pilot(counts, args.pilot_n, cap_per_stratum=args.undersample_cap)
            report["wave"] = "pilot (under-sampled intermittently censored strata)"
        else:
            alloc = design.balanced_allocation(counts, args.pilot_n)
            report["wave"] = "pilot (balanced)"
        report["nuisance_source"] = None
    elif args.method in ("balanced", "srs"):
        if args.n is None:
            raise UsageError("--n is required")
        alloc = (design.balanced_allocation(counts, args.n) if args.method == "balanced"
                 else design.srs_allocation(counts, args.n, rng))
        report["wave"] = "single"
        report["nuisance_source"] = None
    else:
        if args.pilot_validated is None:
            raise UsageError(f"--method {args.method} needs --pilot-validated (or --pilot-n for wave one)")
        if args.n is None or args.target is None:
            raise UsageError("--n and --target are required")
        pilot = loaded.positions(read_row_ids(args.pilot_validated))
        nuis = design.pilot_nuisance(cohort, pilot, args.link)
        k = _target_index(args.target, cohort)
        opt = design.optimal_allocation(counts, nuis, k, args.n)
        report.update({"target": args.target, "target_index": k, "nuisance_source": nuis.source,
                       "pilot_size": int(pilot.size),
                       "pooled_covariance_strata": [s.serialize() for s in nuis.fallback_strata]})
        if args.method == "optimal":
            alloc = opt
            report["wave"] = "single (totals)"
        else:
            table = build_strata(cohort, pilot)
            pilot_alloc = design.Allocation({k_: int(c) for k_, c in zip(table.keys, table.n)}, int(pilot.size))
            alloc = design.adaptive_allocation(opt, pilot_alloc, counts)
            report["wave"] = "adaptive (additional draws)"
            report["optimal_totals"] = {s.serialize(): c for s, c in opt.counts.items()}
            exclude = pilot
    already = {}
    if exclude is not None:
        table = build_strata(cohort, exclude)
        already = {k_: int(n) for k_, n in zip(table.keys, table.n)}
    taken = {k_: alloc[k_] + already.get(k_, 0) for k_ in counts}
    report["saturated_strata"] = [k_.serialize() for k_, N in counts.items() if N > 0 and taken[k_] >= N]
    report["total"] = alloc.total
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_allocation(out / "allocation.csv", alloc, counts)
    if args.sample:
        chosen = design.sample_allocation(cohort, alloc, rng, exclude=exclude)
        write_row_ids(out / "sample.csv", loaded.row_ids[chosen])
        report["sample_file"] = str(out / "sample.csv")
    write_json(out / "design_report.json", report)
    print(json.dumps({"format_version": FORMAT_VERSION, "status": "ok", "total": alloc.total,
                      "out": str(out)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit / cox


def _write_or_print(path, payload):
    if path:
        write_json(path, payload)
    else:
        print(json.dumps({"format_version": FORMAT_VERSION, **payload}, indent=2, sort_keys=True))


def cmd_fit(args) -> int:
    loaded = _load(args)
    cohort = loaded.cohort
    if args.validated:
        validated = loaded.positions(read_row_ids(args.validated))
    elif loaded.validated is not None:
        validated = loaded.validated
    else:
        raise UsageError("--validated is required when the mapping has no validated_flag column")
    fit = mean_score_fit(cohort, validated, args.link, strict=args.strict)
    table = fit.info["strata"]
    names = fit.theta.names(cohort.covariate_names)
    payload = {
        "link": LinkKind.parse(args.link).value,
        "parameters": names,
        "estimates": dict(zip(names, fit.theta.vector.tolist())),
        "standard_errors": dict(zip(names, fit.se.tolist())),
        "covariance": fit.covariance.tolist(),
        "convergence": {"converged": fit.converged, "iterations": fit.iterations,
                        "gradient_norm": fit.gradient_norm, "loglik": fit.loglik},
        "strata": [{"stratum": k.serialize(), "N": int(N), "n": int(n)}
                   for k, N, n in zip(table.keys, table.N, table.n)],
        "positivity_violations": [k.serialize() for k in fit.info["uncovered_strata"]],
        "singleton_strata": [k.serialize() for k in fit.info["singleton_strata"]],
        "warnings": fit.warnings + loaded.warnings,
        "cohort_size": cohort.size,
        "validated_size": int(table.validated.size),
    }
    _write_or_print(args.out, payload)
    return EXIT_OK


def cmd_cox(args) -> int:
    loaded = _load(args)
    cohort = loaded.cohort
    ids, w = read_weights(args.weights)
    pos = loaded.positions(ids)
    X = cohort.covariates[pos]
    if not np.all(np.isfinite(X)):
        bad = loaded.row_ids[pos[~np.all(np.isfinite(X), axis=1)]]
        raise DataError(f"weighted rows without covariates: {bad[:5].tolist()}")
    fit = cox_fit(time=loaded.times[pos], event=loaded.events[pos], X=X, weights=w)
    names = list(cohort.covariate_names)
    payload = {
        "parameters": names,
        "estimates": dict(zip(names, np.asarray(fit.theta).tolist())),
        "standard_errors": dict(zip(names, fit.se.tolist())),
        "covariance": fit.covariance.tolist(),
        "ties": "breslow",
        "convergence": {"converged": fit.converged, "iterations": fit.iterations,
                        "gradient_norm": fit.gradient_norm, "loglik": fit.loglik},
        "n_records": int(pos.size),
    }
    _write_or_print(args.out, payload)
    return EXIT_OK


def cmd_check(args) -> int:
    results = checks.run_all()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meanscore", description="Two-phase designs for discrete-time survival models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    def cohort_args(sp):
        sp.add_argument("--cohort", required=True)
        sp.add_argument("--mapping", required=True)

    d = sub.add_parser("design", help="phase-two allocation")
    cohort_args(d)
    g = d.add_mutually_exclusive_group()
    g.add_argument("--pilot-validated")
    g.add_argument("--pilot-n", type=int)
    d.add_argument("--target")
    d.add_argument("--n", type=int)
    d.add_argument("--method", choices=["optimal", "adaptive", "balanced", "srs"], default="adaptive")
    d.add_argument("--undersample-cap", type=int)
    d.add_argument("--link", choices=[k.value for k in LinkKind], default="cloglog")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--sample", action="store_true", help="also draw the subjects (sample.csv)")
    d.add_argument("--out", default=".")
    d.set_defaults(func=cmd_design)

    f = sub.add_parser("fit", help="mean score fit")
    cohort_args(f)
    f.add_argument("--validated")
    f.add_argument("--link", choices=[k.value for k in LinkKind], default="cloglog")
    f.add_argument("--strict", action="store_true")
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("cox", help="weighted Cox fit")
    cohort_args(c)
    c.add_argument("--weights", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_cox)

    k = sub.add_parser("check", help="run the built-in oracle checks")
    k.set_defaults(func=cmd_check)
    return p


def _fail(code, kind, message) -> int:
    sys.stderr.write(json.dumps({"format_version": FORMAT_VERSION,
                                 "error": {"type": kind, "message": message, "exit_code": code}}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except EstimationError as exc:
        return _fail(EXIT_NUMERIC, type(exc).__name__, str(exc))
    except (DataError, MeanScoreError, ValueError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, str(exc))
    except np.linalg.LinAlgError as exc:
        return _fail(EXIT_NUMERIC, "LinAlgError", str(exc))


if __name__ == "__main__":
    sys.exit(main())
