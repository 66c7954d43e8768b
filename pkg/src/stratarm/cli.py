"""Command-line interface: ``stratarm design|estimate|simulate|replay``.

Exit codes: 0 success, 1 other package errors, 2 bad input or arguments,
3 a stratum smaller than the group size, 4 failure budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, adjust
from .core import CsvSchema, ExperimentData, Propensity, load_columns, load_csv
from .design import Design, assign_coarse, assign_matched_tuples, pair_groups
from .exceptions import DataError, DesignError, FailureBudgetExceeded, StratarmError, StratumTooSmall, UnknownModel
from .inference import ehw_hc2_variance, exact_variance, late_variance
from .montecarlo import SimScenario, compute_excess_risk, impute_replay, parse_design_spec, parse_label, run_scenario

log = logging.getLogger("stratarm")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_STRATUM, EXIT_BUDGET = 0, 1, 2, 3, 4


class UsageError(Exception):
    """Bad command-line input detected after argument parsing."""


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("STRATARM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"STRATARM_SEED must be an integer, got {env!r}") from None


def _meta(args, seed) -> dict:
    return {"tool": "stratarm", "version": __version__, "seed": seed, "invocation": list(args.argv)}


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, default=_default)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _estimators(text):
    labels = [t.strip() for t in text.split(",") if t.strip()]
    if not labels:
        raise UsageError("--est needs at least one estimator")
    for lab in labels:
        key = lab.upper()
        if key not in adjust.ESTIMATORS:
            raise UsageError(f"unknown estimator {lab!r}; choose from {', '.join(e.lower() for e in adjust.ESTIMATORS)}")
    return [lab.upper() for lab in labels]


# ---------------------------------------------------------------------------
# design


def cmd_design(args) -> int:
    seed = _seed(args)
    prop = Propensity.parse(args.prop)
    extra = [args.coarse_col] if args.coarse_col else []
    cols = load_columns(args.inp, CsvSchema(y=None, d=None, extra=extra))
    psi = cols["psi"]
    if args.coarse_col:
        design = assign_coarse(cols[args.coarse_col], prop, seed, psi=psi if psi.shape[1] else None)
    else:
        if psi.shape[1] == 0:
            raise DataError("no psi_* columns to match on")
        design = assign_matched_tuples(psi, prop, seed)
    out = design.to_dict()
    out["meta"] = _meta(args, seed)
    _write_json(out, args.out)
    print(f"groups: {design.n_groups}  excluded: {len(design.excluded)}  homogeneity_score: {design.homogeneity_score:.6g}",
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate


def _load_design(args, data: ExperimentData, cols) -> Design:
    if args.design and args.groups_col:
        raise UsageError("give either --design or --groups-col, not both")
    if args.design:
        obj = json.loads(Path(args.design).read_text())
        design = Design.from_dict(obj)
        if design.n != data.n:
            raise DesignError(f"design has {design.n} units, data has {data.n}")
        return design.relabel(data.d)
    if args.groups_col:
        return Design.from_labels(cols[args.groups_col], data.d)
    raise UsageError("estimate needs --design or --groups-col")


def _fmt(x, width=11):
    return f"{x:{width}.5g}"


def cmd_estimate(args) -> int:
    seed = _seed(args)
    extra = [args.groups_col] if args.groups_col else []
    uptake = args.uptake_col if args.late else None
    if args.late and not uptake:
        raise UsageError("--late needs --uptake-col")
    schema = CsvSchema(uptake=uptake, extra=extra)
    cols = load_columns(args.inp, schema)
    data = load_csv(args.inp, schema)
    design = _load_design(args, data, cols)
    psi = data.psi if data.d_psi else data.h
    pairing = pair_groups(design, psi)
    rows = []
    for key in _estimators(args.est):
        if args.late:
            if key not in adjust.LATE_BACKBONES:
                raise UsageError(f"--late supports {', '.join(k.lower() for k in adjust.LATE_BACKBONES)}, not {key.lower()}")
            est = adjust.wald_late(data, design, key, args.with_z)
            var = late_variance(est, data, design, pairing, args.alpha)
        else:
            est = adjust.estimate(key, data, design, args.with_z, pairing)
            var = exact_variance(est, data, design, pairing, args.alpha)
        row = {**est.to_dict(), "exact": var.to_dict()}
        if args.ehw and not args.late and key in adjust.REGRESSION_BASED:
            row["ehw_hc2"] = ehw_hc2_variance(est, data, design, args.alpha).to_dict()
        rows.append(row)
    if args.out:
        _write_json({"meta": _meta(args, seed), "alpha": args.alpha, "late": args.late, "results": rows}, args.out)
    header = f"{'estimator':<12}{'tau':>11}{'se':>11}{'ci_low':>11}{'ci_high':>11}  gamma"
    if args.ehw:
        header += "   hc2_se"
    print(header)
    for r in rows:
        name = r["estimator"] + ("+z" if r["with_z"] else "")
        ex = r["exact"]
        line = f"{name:<12}{_fmt(r['tau'])}{_fmt(ex['se'])}{_fmt(ex['ci'][0])}{_fmt(ex['ci'][1])}  "
        line += "[" + ", ".join(f"{g:.4g}" for g in r["gamma"]) + "]"
        if args.ehw:
            line += f"   {r['ehw_hc2']['se']:.5g}" if "ehw_hc2" in r else "   -"
        if r.get("branch"):
            line += f"   branch={r['branch'].lower()}"
        if ex["clamped"]:
            line += "   (variance clamped at 0)"
        print(line)
    print(f"# n={rows[0]['n']} p={rows[0]['p']['a']}/{rows[0]['p']['k']} alpha={args.alpha} seed={seed}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / replay


def _read_config(path):
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        return json.loads(text)
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _scenarios(config, args, seed):
    if not isinstance(config, dict):
        raise UsageError("config must be a table")
    config = dict(config)
    listed = config.pop("scenario", None)
    if listed is None:
        listed = [{}]
    if isinstance(listed, dict):
        listed = [listed]
    out = []
    for item in listed:
        merged = {**config, **item}
        if args.reps is not None:
            merged["reps"] = args.reps
        if args.seed is not None or "master_seed" not in merged:
            merged["master_seed"] = seed
        if args.est:
            merged["estimators"] = [t.strip() for t in args.est.split(",") if t.strip()]
        try:
            out.append(SimScenario.from_dict(merged))
        except TypeError as exc:
            raise UsageError(str(exc)) from None
    return out


def _emit_results(results, names, args, seed, extra=None):
    rows = []
    for name, res in zip(names, results):
        for r in res.summary_rows():
            rows.append({**name, **r, "reps": res.reps, "failed": res.failed})
    payload = {"meta": _meta(args, seed), "results": [dict(res.to_dict(), **name) for name, res in zip(names, results)]}
    if extra:
        payload.update(extra)
    if args.out:
        stem = Path(args.out)
        stem = stem.with_suffix("") if stem.suffix in (".csv", ".json") else stem
        _write_csv(rows, stem.with_suffix(".csv"), payload["meta"])
        _write_json(payload, stem.with_suffix(".json"))
        print(f"wrote {stem.with_suffix('.csv')} and {stem.with_suffix('.json')}")
    else:
        _write_csv(rows, None, payload["meta"])
        if extra:
            print(json.dumps(extra, default=_default))


def _write_csv(rows, path, meta):
    import csv
    import io

    buf = io.StringIO()
    buf.write(f"# {json.dumps(meta, default=_default)}\n")
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    if path is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


def cmd_simulate(args) -> int:
    seed = _seed(args)
    scenarios = _scenarios(_read_config(args.config), args, seed)
    results, names = [], []
    for sc in scenarios:
        log.info("model %s n=%d m=%d reps=%d", sc.model_id, sc.n, sc.dim_psi, sc.reps)
        results.append(run_scenario(sc, jobs=args.jobs))
        names.append({"model": sc.model_id, "n": sc.n, "dim_psi": sc.dim_psi})
    extra = None
    if len(results) > 1:
        extra = {"excess_risk": compute_excess_risk(results)}
    _emit_results(results, names, args, seed, extra)
    return EXIT_OK


def cmd_replay(args) -> int:
    seed = _seed(args)
    parse_design_spec(args.design)
    extra = [args.coarse_col] if args.coarse_col else []
    schema = CsvSchema(extra=extra)
    cols = load_columns(args.inp, schema)
    data = load_csv(args.inp, schema)
    base = args.est or "unadj,naive,lin,fe,plin,go,tom"
    labels = []
    for t in base.split(","):
        key, with_z, label = parse_label(t)
        if args.with_z and not with_z and key not in ("UNADJ", "ADAPTIVE"):
            label += "+z"
        labels.append(label)
    labels = list(dict.fromkeys(labels))
    res = impute_replay(data, args.design, reps=args.reps or 200, seed=seed, estimators=labels,
                        strata=cols.get(args.coarse_col) if args.coarse_col else None, jobs=args.jobs)
    _emit_results([res], [{"design": args.design}], args, seed)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stratarm", description="Stratified experiments with covariate adjustment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_in=True):
        p.add_argument("--in", dest="inp", required=need_in, help="input CSV")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("design", help="assign treatment to a covariate file")
    common(p)
    p.add_argument("--prop", required=True, help="treated share a/k")
    p.add_argument("--coarse-col", help="stratum column for a coarse design")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("estimate", help="estimate effects from a completed experiment")
    common(p)
    p.add_argument("--design", help="design JSON written by 'stratarm design'")
    p.add_argument("--groups-col", help="column holding group labels")
    p.add_argument("--est", default="plin", help="comma-separated estimators")
    p.add_argument("--with-z", action="store_true", help="also adjust for z_* columns")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--ehw", action="store_true", help="add HC2 intervals where defined")
    p.add_argument("--late", action="store_true", help="adjusted Wald estimates")
    p.add_argument("--uptake-col", help="realised treatment column for --late")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run simulation scenarios")
    p.add_argument("--config", required=True, help="TOML or JSON scenario file")
    p.add_argument("--out", help="output stem for CSV and JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--est", help="comma-separated estimator labels such as plin,lin+z")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="counterfactual replay of a completed experiment")
    common(p)
    p.add_argument("--design", required=True, help="kind:a/k, kind in matched, complete, coarse")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--est", help="comma-separated estimator labels such as plin,lin+z")
    p.add_argument("--with-z", action="store_true")
    p.add_argument("--coarse-col", help="stratum column for coarse designs")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except StratumTooSmall as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STRATUM
    except FailureBudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (UsageError, DataError, UnknownModel, FileNotFoundError, json.JSONDecodeError) as exc:
        msg = exc.args[0] if isinstance(exc, UnknownModel) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except StratarmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
