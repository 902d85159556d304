"""Command-line interface: ``fact-rf {test,simulate,importance,rolling}``."""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import forest as forest_mod
from .errors import DegenerateVariance, FactError, InvalidInput
from .forest import ForestParams, fit_forest
from .importance import DEFAULT_REPS, METHODS, importance_all
from .inference import RollingSpec, rolling_pvalues
from .simulate import (CASES, SimulationSpec, preset, rmse_diagnostic, run_debias, run_qq,
                       run_size_power, run_spurious)
from .stats import FactConfig, derive_seed, fact_test, inference_size
from .tables import load_dataset, read_csv_columns, write_table

log = logging.getLogger("fact_rf")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
MIN_INFER = 10


class ConfigError(InvalidInput):
    pass


def _build(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    for k in d:
        if k not in names:
            raise ConfigError(f"unknown field {where}.{k}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def forest_params_from(d, where="forest") -> ForestParams:
    return _build(ForestParams, d, where)


def fact_config_from(d, fp: Optional[ForestParams] = None, where="fact") -> FactConfig:
    d = dict(d or {})
    if "forest_params" in d:
        fp = forest_params_from(d.pop("forest_params"), f"{where}.forest_params")
    cfg = _build(FactConfig, d, where)
    return dataclasses.replace(cfg, forest_params=fp) if fp is not None else cfg


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e.msg} (line {e.lineno})") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _check_keys(d: dict, allowed, where):
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown field {where}{k}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


def _split_list(s):
    return [x.strip() for x in s.split(",") if x.strip()] if s else None


def _select(data, selector) -> list[int]:
    """Column indices named by a comma-separated selector (all columns when empty)."""
    names = data.names()
    wanted = _split_list(selector)
    if not wanted or wanted == ["all"]:
        return list(range(data.p))
    for w in wanted:
        if w not in names:
            raise ConfigError(f"feature column {w!r} not found")
    return [names.index(w) for w in wanted]


def _seeded(cfg: FactConfig, seed):
    return cfg if seed is None else dataclasses.replace(cfg, seed=seed)


def cmd_test(args) -> int:
    conf = load_config(args.config)
    _check_keys(conf, {"fact", "forest"}, "")
    fp = forest_params_from(conf["forest"]) if "forest" in conf else None
    cfg = _seeded(fact_config_from(conf.get("fact"), fp), args.seed)
    data, _ = load_dataset(args.data, args.response)
    targets = _select(data, args.features)
    n_inf = inference_size(data.n, cfg)
    k = cfg.k_n or 1
    if n_inf < max(MIN_INFER, 2 * k):
        raise ConfigError(f"inference sample too small: {n_inf} rows (need >= {max(MIN_INFER, 2 * k)})")
    out = _out_dir(args)
    names = data.names()
    reports, rows = [], []
    for j in targets:
        try:
            rep = fact_test(j, data, cfg)
        except DegenerateVariance as e:
            log.warning("%s: %s", names[j], e)
            rows.append({"feature": names[j], "variant": cfg.variant, "stat": "", "p_value": "",
                         "status": "degenerate"})
            continue
        d = rep.to_dict()
        d["feature_name"] = names[j]
        reports.append(d)
        rows.append({"feature": names[j], "variant": cfg.variant, "stat": rep.stat,
                     "p_value": rep.p_value, "status": "ok"})
    echo = {"command": "test", "data": os.path.basename(args.data), "response": args.response,
            "fact": cfg.to_dict()}
    write_table(out / "fact_results.csv", rows,
                ["feature", "variant", "stat", "p_value", "status"], echo)
    with open(out / "fact_reports.json", "w", encoding="utf-8") as fh:
        json.dump({"config": echo, "reports": reports}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for r in rows:
        p = r["p_value"]
        print(f"{r['feature']}: " + (f"stat={r['stat']:.4f} p={p:.4g}" if r["status"] == "ok" else "degenerate"))
    if not reports:
        print("error: every feature was degenerate", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


EXPERIMENT_KEYS = {"name", "kind", "case", "spec", "fact", "forest", "alphas", "features",
                   "methods", "comparisons", "perm_reps", "feature", "component", "k_values",
                   "test_points"}
KINDS = ("size_power", "spurious", "qq", "debias", "rmse")


def _sim_spec(exp, where, seed) -> SimulationSpec:
    overrides = exp.get("spec") or {}
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}.spec must be a JSON object")
    if "case" in exp:
        if exp["case"] not in CASES:
            raise ConfigError(f"{where}.case: unknown case {exp['case']!r}")
        names = {f.name for f in dataclasses.fields(SimulationSpec)}
        for k in overrides:
            if k not in names:
                raise ConfigError(f"unknown field {where}.spec.{k}")
        try:
            spec = preset(exp["case"], **overrides)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where}.spec: {e}") from None
    else:
        spec = _build(SimulationSpec, overrides, f"{where}.spec")
    if spec.reps < 1:
        raise ConfigError(f"{where}.spec.reps must be >= 1")
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    return spec


def _run_experiment(exp, idx, out: Path, seed) -> str:
    where = f"experiments[{idx}]"
    if not isinstance(exp, dict):
        raise ConfigError(f"{where} must be a JSON object")
    _check_keys(exp, EXPERIMENT_KEYS, f"{where}.")
    kind = exp.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"{where}.kind must be one of {', '.join(KINDS)}")
    name = str(exp.get("name") or f"{kind}_{idx}")
    spec = _sim_spec(exp, where, seed)
    fp = forest_params_from(exp["forest"], f"{where}.forest") if "forest" in exp else None
    cfg = _seeded(fact_config_from(exp.get("fact"), fp, f"{where}.fact"), seed)
    echo = {"command": "simulate", "experiment": exp, "resolved_spec": spec.to_dict(),
            "resolved_fact": cfg.to_dict(), "seed": seed}
    if kind == "size_power":
        alphas = tuple(exp.get("alphas", (0.1, 0.05, 0.025)))
        for a in alphas:
            if not (isinstance(a, (int, float)) and 0 < a < 1):
                raise ConfigError(f"{where}.alphas: {a} is not in (0, 1)")
        feats = tuple(exp.get("features", (1, 11, 21, 31, 2, 12, 22, 32)))
        rows = run_size_power(spec, cfg, alphas, feats)
        write_table(out / f"{name}.csv", rows, ["case", "feature", "alpha", "rate"], echo)
        return f"{name}: case {spec.case_label or '-'} size/power over {spec.reps} reps, {len(rows)} cells"
    if kind == "spurious":
        methods = tuple(exp.get("methods", ("MDI", "MDA", "CPI", "FACT")))
        for m in methods:
            if m not in ("MDI", "MDA", "CPI", "FACT"):
                raise ConfigError(f"{where}.methods: unknown method {m!r}")
        comps = tuple(tuple(c) for c in exp.get("comparisons", ((12, 1), (12, 21))))
        rows = run_spurious(spec, methods, comps, cfg, fp or cfg.forest_params,
                            int(exp.get("perm_reps", DEFAULT_REPS)))
        write_table(out / f"{name}.csv", rows, ["case", "method", "comparison", "fraction"], echo)
        return f"{name}: case {spec.case_label or '-'} spurious fractions over {spec.reps} reps"
    if kind == "qq":
        comp = exp.get("component", ["identity", 0])
        res = run_qq(spec, cfg, int(exp.get("feature", 12)), comp[0], int(comp[1]))
        write_table(out / f"{name}.csv", res.rows(), ["theoretical", "empirical"], echo)
        s = res.statistics
        summary = [{"reps": s.size, "mean": float(s.mean()), "sd": float(s.std(ddof=1)) if s.size > 1 else float("nan"),
                    "ks_stat": res.ks_stat, "ks_pvalue": res.ks_pvalue}]
        write_table(out / f"{name}_ks.csv", summary, ["reps", "mean", "sd", "ks_stat", "ks_pvalue"], echo)
        return f"{name}: KS distance {res.ks_stat:.4f} (p={res.ks_pvalue:.3g}) over {s.size} reps"
    if kind == "debias":
        ks = tuple(exp.get("k_values", (3, 7)))
        res = run_debias(spec, int(exp.get("feature", 12)), cfg, ks)
        rows = [{"statistic": k, "mean": float(v.mean()), "abs_mean": abs(float(v.mean())),
                 "sd": float(v.std(ddof=1)) if v.size > 1 else float("nan")} for k, v in res.items()]
        write_table(out / f"{name}.csv", rows, ["statistic", "mean", "abs_mean", "sd"], echo)
        return f"{name}: " + ", ".join(f"{r['statistic']}={r['mean']:.3f}" for r in rows)
    rm = rmse_diagnostic(spec, fp or cfg.forest_params, int(exp.get("test_points", 10000)))
    rows = [{"rep": r, "n": spec.n, "rmse": float(v)} for r, v in enumerate(rm)]
    write_table(out / f"{name}.csv", rows, ["rep", "n", "rmse"], echo)
    return f"{name}: mean RMSE {rm.mean():.3f} over {rm.size} reps"


def cmd_simulate(args) -> int:
    if args.config is None:
        raise ConfigError("simulate needs --config")
    conf = load_config(args.config)
    _check_keys(conf, {"experiments"}, "")
    exps = conf.get("experiments")
    if not isinstance(exps, list) or not exps:
        raise ConfigError("experiments must be a nonempty list")
    # validate everything before spending compute
    for i, e in enumerate(exps):
        if not isinstance(e, dict):
            raise ConfigError(f"experiments[{i}] must be a JSON object")
        where = f"experiments[{i}]"
        _check_keys(e, EXPERIMENT_KEYS, f"{where}.")
        if e.get("kind") not in KINDS:
            raise ConfigError(f"{where}.kind must be one of {', '.join(KINDS)}")
        _sim_spec(e, where, args.seed)
        fp = forest_params_from(e["forest"], f"{where}.forest") if "forest" in e else None
        fact_config_from(e.get("fact"), fp, f"{where}.fact")
    out = _out_dir(args)
    for i, e in enumerate(exps):
        print(_run_experiment(e, i, out, args.seed), flush=True)
    return EXIT_OK


def cmd_importance(args) -> int:
    conf = load_config(args.config)
    _check_keys(conf, {"forest", "reps"}, "")
    methods = _split_list(args.methods) or list(METHODS)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    fp = forest_params_from(conf.get("forest"))
    reps = int(conf.get("reps", args.reps))
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    data, _ = load_dataset(args.data, args.response, _split_list(args.features))
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args)
    forest = fit_forest(data, fp, derive_seed(seed, 0xF0))
    results = [importance_all(m, forest, data, reps, derive_seed(seed, 0xF1)) for m in methods]
    rows = [r for res in results for r in res.rows(data.names())]
    echo = {"command": "importance", "data": os.path.basename(args.data), "response": args.response,
            "methods": methods, "forest": fp.to_dict(), "reps": reps, "seed": seed}
    write_table(out / "importance.csv", rows, ["feature", "method", "score"], echo)
    for res in results:
        top = int(np.argmax(res.scores))
        print(f"{res.method}: top feature {data.names()[top]} ({res.scores[top]:.4g})")
    return EXIT_OK


def _parse_dates(values, column):
    try:
        parsed = [dt.date.fromisoformat(v.strip()[:10]) for v in values]
    except ValueError:
        raise ConfigError(f"column {column!r} has a value that is not an ISO-8601 date") from None
    for a, b in zip(parsed, parsed[1:]):
        if b <= a:
            raise ConfigError(f"dates in column {column!r} are not strictly increasing ({a} then {b})")
    return [d.isoformat() for d in parsed]


def cmd_rolling(args) -> int:
    conf = load_config(args.config)
    _check_keys(conf, {"fact", "forest", "window_length", "step", "horizon"}, "")
    fp = forest_params_from(conf["forest"]) if "forest" in conf else None
    base = {"split_mode": "oob", "k_n": 1}
    base.update(conf.get("fact") or {})
    cfg = _seeded(fact_config_from(base, fp), args.seed)
    spec = RollingSpec(int(conf.get("window_length", args.window)), int(conf.get("step", args.step)),
                       int(conf.get("horizon", args.horizon)))
    header, _ = read_csv_columns(args.data)
    if args.date_column not in header:
        raise ConfigError(f"date column {args.date_column!r} not found in {args.data}")
    data, extra = load_dataset(args.data, args.response, exclude=[args.date_column])
    targets = _select(data, args.features)
    dates = _parse_dates(extra[args.date_column], args.date_column)
    spec.n_windows(data.n)
    out = _out_dir(args)
    rows = rolling_pvalues(data, spec, cfg, targets, labels=dates, fdr=args.fdr)
    cols = ["window", "window_end", "feature", "stat", "p_value"] + (["rejected"] if args.fdr else [])
    echo = {"command": "rolling", "data": os.path.basename(args.data), "response": args.response,
            "rolling": dataclasses.asdict(spec), "fact": cfg.to_dict(), "fdr": args.fdr}
    write_table(out / "rolling.csv", rows, cols, echo)
    n_win = rows[-1]["window"] + 1 if rows else 0
    flagged = sum(1 for r in rows if r.get("rejected"))
    print(f"{n_win} windows x {len(targets)} features" + (f", {flagged} cells flagged at FDR {args.fdr}" if args.fdr else ""))
    return EXIT_OK


def _u64(s):
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _threads(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return v


def _fdr(s):
    v = float(s)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("fdr must lie in (0, 1)")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=_u64, default=None, help="root seed (overrides config)")
    common.add_argument("--threads", type=_threads, default=1, help="worker threads for forest growing")
    common.add_argument("--out", default=".", help="output directory")

    p = _Parser(prog="fact-rf", description="Random-forest feature significance tests.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("test", parents=[common], help="FACT p-values for features of a CSV")
    t.add_argument("data")
    t.add_argument("--response", required=True)
    t.add_argument("--features", help="comma-separated features to test (default: all); every other column stays a covariate")
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", parents=[common], help="run simulation experiments from a config")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("importance", parents=[common], help="MDI/MDA/CPI scores for a CSV")
    i.add_argument("data")
    i.add_argument("--response", required=True)
    i.add_argument("--features", help="comma-separated covariate columns (default: all but response)")
    i.add_argument("--methods", default="MDI,MDA,CPI")
    i.add_argument("--reps", type=int, default=DEFAULT_REPS)
    i.set_defaults(func=cmd_importance)

    r = sub.add_parser("rolling", parents=[common], help="rolling-window FACT p-values for a time series")
    r.add_argument("data")
    r.add_argument("--date-column", required=True)
    r.add_argument("--response", required=True)
    r.add_argument("--features", help="comma-separated features to test (default: all)")
    r.add_argument("--window", type=int, default=60)
    r.add_argument("--step", type=int, default=3)
    r.add_argument("--horizon", type=int, default=1)
    r.add_argument("--fdr", type=_fdr, default=None, help="flag per-window BH rejections at this level")
    r.set_defaults(func=cmd_rolling)
    return p


def main(argv=None) -> int:
    level = os.environ.get("FACT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    forest_mod.set_threads(args.threads)
    try:
        return args.func(args)
    except InvalidInput as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FactError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
