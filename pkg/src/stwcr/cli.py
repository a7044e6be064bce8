"""Command-line surface: dataset ingestion, estimation reports, simulations.

Commands::

    stwcr estimate-stwcr    --input data.csv --a 1 --s 7 --h 0.1 ...
    stwcr estimate-stwcrve  --input data.csv --a1 1 --a0 0 --s1 8 --s0 7 ...
    stwcr simulate          --scenario I --n 1000 --reps 300 --query stwcr:1:7 ...
    stwcr truth             --scenario I --query stwcr:1:7 --truth-cache cache.json
    stwcr emit-draws        --scenario I --n 10000 --out draws.csv

Estimation commands emit a single JSON report embedding every parameter
needed to reproduce it; ``simulate`` emits a metrics table (CSV by
default); ``truth`` populates the ground-truth cache; ``emit-draws``
writes raw (b, s, a, x1) draws for external plotting. Failures exit
nonzero with a machine-readable error JSON on stderr.

Flags may also be supplied through ``--config file.json`` holding the
same keys (dashes as underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import math
import re
import sys

import numpy as np

from . import __version__
from .core import SmoothingParams
from .eif import StwcrQuery, StwcrveQuery
from .errors import DatasetParseError, InvalidParameterError, StwcrError
from .estimators import ModelSpecs, estimate_stwcr, estimate_stwcrve, make_folds
from .nuisance import Dataset
from .simulation import (
    ScenarioSpec,
    SimConfig,
    compute_truths,
    gen_dataset,
    run_monte_carlo,
)

SCHEMA_VERSION = 1

logger = logging.getLogger("stwcr.cli")

_X_COL = re.compile(r"^x(\d+)$")


def load_dataset(path, column_map=None, outcome_kind=None) -> Dataset:
    """Read a headed CSV into a Dataset.

    ``column_map`` may override the default column names
    {"y": "y", "a": "a", "s": "s", "b": "b", "x": ["x1", ..., "xp"]};
    by default every header matching x<digits> becomes a covariate, in
    numeric order. Parse failures name the offending row and column.
    """
    column_map = dict(column_map or {})
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetParseError(f"{path}: empty file (header row required)") from None
        header = [c.strip() for c in header]
        names = {"y": column_map.get("y", "y"), "a": column_map.get("a", "a"),
                 "s": column_map.get("s", "s"), "b": column_map.get("b", "b")}
        x_cols = column_map.get("x")
        if x_cols is None:
            matches = sorted(((int(m.group(1)), c) for c in header if (m := _X_COL.match(c))))
            x_cols = [c for _, c in matches]
        idx = {}
        for role, col in list(names.items()) + [(f"x:{c}", c) for c in x_cols]:
            if col not in header:
                raise DatasetParseError(f"{path}: missing column {col!r}")
            idx[role] = header.index(col)

        rows = {role: [] for role in idx}
        for i, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DatasetParseError(f"{path}: row {i}: expected {len(header)} cells, got {len(row)}")
            for role, j in idx.items():
                cell = row[j].strip()
                try:
                    val = float(cell)
                except ValueError:
                    raise DatasetParseError(
                        f"{path}: row {i}, column {header[j]!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(val):
                    raise DatasetParseError(
                        f"{path}: row {i}, column {header[j]!r}: non-finite value {cell!r}")
                if role == "a" and val not in (0.0, 1.0):
                    raise DatasetParseError(
                        f"{path}: row {i}, column {header[j]!r}: treatment must be 0 or 1, got {cell!r}")
                rows[role].append(val)
    if not rows["y"]:
        raise DatasetParseError(f"{path}: no data rows")
    x = np.column_stack([rows[f"x:{c}"] for c in x_cols]) if x_cols else np.empty((len(rows["y"]), 0))
    return Dataset(y=rows["y"], a=rows["a"], s=rows["s"], b=rows["b"], x=x,
                   covariate_names=tuple(x_cols), outcome_kind=outcome_kind)


def parse_query(text: str):
    """Parse ``stwcr:a:s`` or ``stwcrve:a1:a0:s1:s0``."""
    parts = text.split(":")
    try:
        if parts[0] == "stwcr" and len(parts) == 3:
            return StwcrQuery(a=int(parts[1]), s=float(parts[2]))
        if parts[0] == "stwcrve" and len(parts) == 5:
            return StwcrveQuery(a1=int(parts[1]), a0=int(parts[2]),
                                s1=float(parts[3]), s0=float(parts[4]))
    except ValueError:
        pass
    raise InvalidParameterError(
        f"cannot parse query {text!r}; expected stwcr:a:s or stwcrve:a1:a0:s1:s0")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stwcr",
                                description="Trimmed smoothed controlled-risk estimation")
    p.add_argument("--version", action="version", version=f"stwcr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="JSON file with default values for any flag")
        sp.add_argument("--t", type=float, default=None, help="trim threshold (default 0.1)")
        sp.add_argument("--epsilon", type=float, default=None, help="indicator smoothing scale (default 0.1)")
        sp.add_argument("--h", type=float, default=None)
        sp.add_argument("--h0", type=float, default=None)
        sp.add_argument("--h1", type=float, default=None)
        sp.add_argument("--alpha", type=float, default=None, help="CI miscoverage (default 0.05)")
        sp.add_argument("--quad-nodes", type=int, default=None)
        sp.add_argument("--window", type=float, default=None, help="kernel truncation radius in bandwidths")
        sp.add_argument("--folds", type=int, default=None, help="number of cross-fitting folds (default 5)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--known-propensity", type=float, default=None,
                        help="known treatment probability P(A=1|b,x) (default 0.5)")
        sp.add_argument("--threads", type=int, default=None, help="worker processes for simulate")
        sp.add_argument("--out", default=None, help="output path (default stdout)")
        sp.add_argument("--format", choices=("json", "csv"), default=None)

    def add_columns(sp):
        sp.add_argument("--input", required=True, help="CSV file with a header row")
        sp.add_argument("--y-col", default=None)
        sp.add_argument("--a-col", default=None)
        sp.add_argument("--s-col", default=None)
        sp.add_argument("--b-col", default=None)
        sp.add_argument("--x-cols", default=None, help="comma-separated covariate columns")
        sp.add_argument("--outcome-kind", choices=("binary", "continuous"), default=None)

    sp = sub.add_parser("estimate-stwcr", help="risk estimate at one (arm, marker) query")
    add_columns(sp)
    sp.add_argument("--a", type=int, required=True)
    sp.add_argument("--s", type=float, required=True)
    add_common(sp)

    sp = sub.add_parser("estimate-stwcrve", help="relative-efficacy estimate")
    add_columns(sp)
    sp.add_argument("--a1", type=int, required=True)
    sp.add_argument("--a0", type=int, required=True)
    sp.add_argument("--s1", type=float, required=True)
    sp.add_argument("--s0", type=float, required=True)
    add_common(sp)

    for name, help_text in (("simulate", "bias/coverage Monte Carlo"),
                            ("truth", "populate the ground-truth cache")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--scenario", required=True, choices=("I", "II", "III"))
        sp.add_argument("--n", type=int, default=None)
        sp.add_argument("--reps", type=int, default=None)
        sp.add_argument("--query", action="append", default=None,
                        help="stwcr:a:s or stwcrve:a1:a0:s1:s0 (repeatable)")
        sp.add_argument("--truth-cache", default=None, help="JSON cache path")
        sp.add_argument("--truth-mc-size", type=int, default=None)
        sp.add_argument("--truth-seed", type=int, default=None)
        add_common(sp)

    sp = sub.add_parser("emit-draws", help="write raw (b, s, a, x1) draws")
    sp.add_argument("--scenario", required=True, choices=("I", "II", "III"))
    sp.add_argument("--n", type=int, default=None)
    add_common(sp)
    return p


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the optional JSON config file."""
    path = getattr(args, "config", None)
    if not path:
        return args
    with open(path, "r", encoding="utf-8") as fh:
        conf = json.load(fh)
    for key, val in conf.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise InvalidParameterError(f"unknown config key {key!r}")
        if getattr(args, attr) is None:
            setattr(args, attr, val)
    return args


def _params_from(args, need=()) -> SmoothingParams:
    def got(name, default):
        v = getattr(args, name, None)
        return default if v is None else v

    params = SmoothingParams(
        t=got("t", 0.1), epsilon=got("epsilon", 0.1),
        h=getattr(args, "h", None), h0=getattr(args, "h0", None), h1=getattr(args, "h1", None),
        alpha=got("alpha", 0.05), quad_nodes=int(got("quad_nodes", 64)),
        window_halfwidth_in_h=got("window", 8.0))
    for name in need:
        if getattr(params, name) is None:
            raise InvalidParameterError(f"--{name} is required for this command")
    return params


def _model_specs_from(args) -> ModelSpecs:
    kp = getattr(args, "known_propensity", None)
    if kp is None:
        return ModelSpecs()  # default: known 1:1 randomization
    return ModelSpecs(known_propensity=float(kp))


def _params_dict(params: SmoothingParams) -> dict:
    return {"t": params.t, "epsilon": params.epsilon, "h": params.h, "h0": params.h0,
            "h1": params.h1, "alpha": params.alpha, "quad_nodes": params.quad_nodes,
            "window_halfwidth_in_h": params.window_halfwidth_in_h}


def _emit(text: str, out_path):
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _dataset_from_args(args) -> Dataset:
    column_map = {}
    for role in ("y", "a", "s", "b"):
        v = getattr(args, f"{role}_col", None)
        if v:
            column_map[role] = v
    if getattr(args, "x_cols", None):
        column_map["x"] = [c.strip() for c in args.x_cols.split(",") if c.strip()]
    return load_dataset(args.input, column_map, outcome_kind=getattr(args, "outcome_kind", None))


def _report_json(command, params, query_dict, extra) -> str:
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "timestamp": datetime.datetime.now().isoformat(),
        "params": _params_dict(params),
        "query": query_dict,
    }
    report.update(extra)
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _cmd_estimate_stwcr(args) -> int:
    data = _dataset_from_args(args)
    params = _params_from(args, need=("h",))
    seed = args.seed if args.seed is not None else 0
    k = args.folds if args.folds is not None else 5
    folds = make_folds(len(data), k, seed)
    rep = estimate_stwcr(data, StwcrQuery(a=args.a, s=args.s), params, folds,
                         model_specs=_model_specs_from(args))
    out = _report_json("estimate-stwcr", params, {"a": args.a, "s": args.s}, {
        "input": args.input, "n": rep.n, "k_folds": k, "fold_seed": seed,
        "tau_num_hat": rep.tau_num_hat, "tau_den_hat": rep.tau_den_hat,
        "tau_hat": rep.tau_hat, "sigma1_sq_hat": rep.sigma1_sq_hat, "se": rep.se,
        "ci": list(rep.ci), "density_floor_hits": rep.density_floor_hits,
        "degenerate_folds": rep.degenerate_folds, "warnings": list(rep.warnings),
    })
    _emit(out, args.out)
    return 0


def _cmd_estimate_stwcrve(args) -> int:
    data = _dataset_from_args(args)
    params = _params_from(args, need=("h0", "h1"))
    seed = args.seed if args.seed is not None else 0
    k = args.folds if args.folds is not None else 5
    folds = make_folds(len(data), k, seed)
    q = StwcrveQuery(a1=args.a1, a0=args.a0, s1=args.s1, s0=args.s0)
    rep = estimate_stwcrve(data, q, params, folds, model_specs=_model_specs_from(args))
    out = _report_json("estimate-stwcrve", params,
                       {"a1": args.a1, "a0": args.a0, "s1": args.s1, "s0": args.s0}, {
        "input": args.input, "n": rep.n, "k_folds": k, "fold_seed": seed,
        "tau_num_hat": rep.tau_num_hat, "tau_den_hat": rep.tau_den_hat,
        "rho_hat": rep.rho_hat, "delta_hat": rep.delta_hat,
        "sigma2log_sq_hat": rep.sigma2log_sq_hat, "sigma2_sq_hat": rep.sigma2_sq_hat,
        "ci_rho": list(rep.ci_rho), "ci_delta": list(rep.ci_delta),
        "log_scale": rep.log_scale, "density_floor_hits": rep.density_floor_hits,
        "degenerate_folds": rep.degenerate_folds, "warnings": list(rep.warnings),
    })
    _emit(out, args.out)
    return 0


def _queries_from(args):
    if not args.query:
        raise InvalidParameterError("at least one --query is required")
    return tuple(parse_query(q) for q in args.query)


def _sim_config_from(args) -> SimConfig:
    queries = _queries_from(args)
    need = set()
    for q in queries:
        need.update(("h",) if isinstance(q, StwcrQuery) else ("h0", "h1"))
    params = _params_from(args, need=sorted(need))
    return SimConfig(
        scenario=args.scenario,
        n=args.n if args.n is not None else 1000,
        reps=args.reps if args.reps is not None else 1,
        queries=queries, params=params,
        k_folds=args.folds if args.folds is not None else 5,
        master_seed=args.seed if args.seed is not None else 1,
        truth_mc_size=args.truth_mc_size if args.truth_mc_size is not None else 2_000_000,
        truth_seed=args.truth_seed if args.truth_seed is not None else 20_260_809,
        model_specs=_model_specs_from(args),
        n_jobs=args.threads if args.threads is not None else 1)


def _cmd_simulate(args) -> int:
    config = _sim_config_from(args)
    rows = run_monte_carlo(config, truth_cache_path=args.truth_cache)
    fmt = args.format or "csv"
    if fmt == "json":
        payload = [{"scenario": config.scenario, "n": config.n, "query": r.query,
                    "truth": r.truth, "mean_estimate": r.mean_estimate,
                    "pct_bias": r.pct_bias, "coverage": r.coverage,
                    "mean_se": r.mean_se, "reps": r.reps, "failed": r.failed}
                   for r in rows]
        _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)
    else:
        import io

        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["scenario", "n", "query", "truth", "mean_estimate",
                    "pct_bias", "coverage", "mean_se", "reps", "failed"])
        for r in rows:
            w.writerow([config.scenario, config.n, r.query, f"{r.truth:.8g}",
                        f"{r.mean_estimate:.8g}", f"{r.pct_bias:.6g}", f"{r.coverage:.6g}",
                        f"{r.mean_se:.6g}", r.reps, r.failed])
        _emit(buf.getvalue(), args.out)
    return 0


def _cmd_truth(args) -> int:
    queries = _queries_from(args)
    need = set()
    for q in queries:
        need.update(("h",) if isinstance(q, StwcrQuery) else ("h0", "h1"))
    params = _params_from(args, need=sorted(need))
    truths = compute_truths(
        args.scenario, queries, params,
        truth_mc_size=args.truth_mc_size if args.truth_mc_size is not None else 2_000_000,
        truth_seed=args.truth_seed if args.truth_seed is not None else 20_260_809,
        cache_path=args.truth_cache)
    _emit(json.dumps(truths, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def _cmd_emit_draws(args) -> int:
    n = args.n if args.n is not None else 10_000
    seed = args.seed if args.seed is not None else 1
    data = gen_dataset(ScenarioSpec(args.scenario, n, seed))
    import io

    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["b", "s", "a", "x1"])
    for i in range(n):
        w.writerow([f"{data.b[i]:.8g}", f"{data.s[i]:.8g}", int(data.a[i]),
                    f"{data.x[i, 0]:.8g}"])
    _emit(buf.getvalue(), args.out)
    return 0


_COMMANDS = {
    "estimate-stwcr": _cmd_estimate_stwcr,
    "estimate-stwcrve": _cmd_estimate_stwcrve,
    "simulate": _cmd_simulate,
    "truth": _cmd_truth,
    "emit-draws": _cmd_emit_draws,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args)
        return _COMMANDS[args.command](args)
    except (StwcrError, OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(json.dumps(
            {"error": str(exc), "type": type(exc).__name__}, sort_keys=True) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
