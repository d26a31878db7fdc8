"""Command-line entry point.

Every command reads one TOML config (sections [grid], [law], [simulate],
[data], [partition], [models], [estimate], [bootstrap], [diagnose],
[oracle]) and writes sorted-key JSON results with a provenance block, plus
a plain-text table that is rendered from those JSON rows.
"""

import argparse
import copy
import logging
import os
import sys

import jsonschema
import numpy as np

from . import __version__
from .data import Partition
from .diagnostics import (check_positivity, falsify_ay_isolation,
                          falsify_modified_treatment)
from .errors import ConfigError, DiagnosticsRejected, SepfxError, TooManyFailures
from .estimators import ESTIMATORS, EstimandTarget, estimate, estimate_effect
from .inference import (MAX_FAILURE_SHARE, BootstrapPlan, bootstrap_many, percentile_interval,
                        resolve_threads)
from .io import (config_hash, dump_toml, grid_from_config, key_line, law_from_config,
                 law_to_config, parse_toml, preset_text, read_config, read_csv, to_json,
                 write_csv, write_text)
from .nuisance import NuisanceSpecSuite, Workspace, default_suite
from .sim import VIOLATIONS, oracle_conditional_mean, oracle_cse, simulate

log = logging.getLogger("sepfx")

_NUM = {"type": "number"}
_COEFS = {"type": "object", "additionalProperties": _NUM}
_STRS = {"type": "array", "items": {"type": "string"}}
_BIT = {"type": "integer", "enum": [0, 1]}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "grid": {"type": "object", "additionalProperties": False, "properties": {
            "K": {"type": "integer", "minimum": 0},
            "ordering": {"enum": ["StandardCDL", "TerminalDBeforeC"]}}},
        "law": {"type": "object", "additionalProperties": False, "properties": {
            "sigma": {"type": "number", "exclusiveMinimum": 0},
            "censor_terminal_only": {"type": "boolean"},
            "monotone": {"type": "boolean"},
            "violation": {"enum": list(VIOLATIONS)},
            "violation_strength": _NUM,
            "baseline": {"type": "array", "items": {
                "type": "object", "additionalProperties": False, "required": ["name"],
                "properties": {"name": {"type": "string"},
                               "dist": {"enum": ["bernoulli", "gaussian"]},
                               "p": _NUM, "mean": _NUM, "sd": _NUM}}},
            "covariates": {"type": "array", "items": {
                "type": "object", "additionalProperties": False, "required": ["name"],
                "properties": {"name": {"type": "string"}, "block": {"enum": ["AY", "AD"]},
                               "coefs": _COEFS}}},
            "hazard": _COEFS, "outcome": _COEFS, "censor": _COEFS, "treatment": _COEFS}},
        "simulate": {"type": "object", "additionalProperties": False, "properties": {
            "n": {"type": "integer", "minimum": 1},
            "design": {"enum": ["TwoArm", "FourArm", "SixArm"]},
            "violation": {"enum": list(VIOLATIONS)}}},
        "data": {"type": "object", "additionalProperties": False, "required": ["path"],
                 "properties": {"path": {"type": "string"}}},
        "partition": {"type": "object", "additionalProperties": False,
                      "properties": {"ay": _STRS, "ad": _STRS}},
        "models": {"type": "object", "additionalProperties": False,
                   "properties": {"formulas": _STRS}},
        "estimate": {"type": "object", "additionalProperties": False, "properties": {
            "targets": {"type": "array", "items": {
                "type": "array", "items": _BIT, "minItems": 2, "maxItems": 2}},
            "contrasts": {"type": "array", "items": _BIT},
            "estimators": {"type": "array", "items": {"enum": list(ESTIMATORS)}},
            "cap": {"type": "number", "exclusiveMinimum": 0, "maximum": 100}}},
        "bootstrap": {"type": "object", "additionalProperties": False, "properties": {
            "n_boot": {"type": "integer", "minimum": 2},
            "ci_level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "dump_replicates": {"type": "boolean"}}},
        "diagnose": {"type": "object", "additionalProperties": False, "properties": {
            "checks": {"type": "array", "items": {
                "enum": ["positivity", "ay_isolation", "modified_treatment"]}},
            "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "correction": {"enum": ["bonferroni", "none"]}}},
        "oracle": {"type": "object", "additionalProperties": False, "properties": {
            "n_mc": {"type": "integer", "minimum": 1000}}},
    },
}


# --------------------------------------------------------------------- config
def validate_config(cfg, text=""):
    """Schema-check a parsed config; raise ConfigError naming key and line."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(cfg),
                    key=lambda e: [str(p) for p in e.absolute_path])
    if not errors:
        return
    err = errors[0]
    path = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        path = path + extra[:1]
        message = f"unknown key '{extra[0]}'"
    else:
        message = err.message
    raise ConfigError(message, path=".".join(path) or None, line=key_line(text, path))


def derived_seeds(seed):
    """Independent integer seeds for simulation, bootstrap and oracle streams."""
    s = np.random.SeedSequence(int(seed)).generate_state(3)
    return {"simulate": int(s[0]), "bootstrap": int(s[1]), "oracle": int(s[2])}


class Run:
    """A validated config plus command-line overrides."""

    def __init__(self, cfg, text, args, base_dir="."):
        validate_config(cfg, text)
        self.cfg, self.text, self.base_dir = cfg, text, base_dir
        self.seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        self.seeds = derived_seeds(self.seed)
        self.threads = resolve_threads(args.threads)
        self.out = args.out or "."
        self.strict = args.strict
        self._law = None

    def section(self, name):
        return self.cfg.get(name, {})

    @property
    def grid(self):
        return grid_from_config(self.section("grid"))

    @property
    def law(self):
        if self._law is None:
            if "law" not in self.cfg:
                raise ConfigError("a [law] section is required", path="law")
            self._law = law_from_config(self.grid, self.section("law"))
        return self._law

    def partition(self):
        p = self.section("partition")
        return Partition(tuple(p.get("ay", ())), tuple(p.get("ad", ()))) if p else None

    def dataset(self):
        part = self.partition()
        if "data" in self.cfg:
            path = self.section("data")["path"]
            if not os.path.isabs(path):
                path = os.path.join(self.base_dir, path)
            return read_csv(path, self.grid.ordering, part)
        if "law" not in self.cfg:
            raise ConfigError("either [data] or [law] with [simulate] is required", path="data")
        sim = self.section("simulate")
        ds = simulate(self.law, int(sim.get("n", 1000)), self.seeds["simulate"],
                      sim.get("design", "TwoArm"), sim.get("violation"), self.threads)
        return ds.with_partition(part) if part else ds

    def suite(self, ds):
        forms = self.section("models").get("formulas")
        return NuisanceSpecSuite.from_formulas(forms) if forms else default_suite(ds)

    def provenance(self, command):
        return {"command": command, "config_sha256": config_hash(self.text),
                "seed": self.seed, "version": __version__}

    def write(self, name, payload, table):
        os.makedirs(self.out, exist_ok=True)
        write_text(to_json(payload), os.path.join(self.out, f"{name}.json"))
        if table is not None:
            write_text(table, os.path.join(self.out, f"{name}.txt"))


# --------------------------------------------------------------------- tables
def target_label(t, K):
    if isinstance(t, (list, tuple)) and len(t) == 1:
        a = t[0]
        return f"E(Y^(a={a}) | D^(a={a})_{K + 1}=0)"
    a_y, a_d = t
    return f"E(Y^(aY={a_y},aD={a_d}) | D^(aY={a_y},aD={a_d})_{K + 1}=0)"


def contrast_label(a_d, K):
    return f"E(Y^(aY=1,aD={a_d}) - Y^(aY=0,aD={a_d}) | D^(aD={a_d})_{K + 1}=0)"


def _num(v, digits=6):
    return "NA" if v is None else f"{v:.{digits}f}"


def render_table(rows, digits=6):
    """Fixed-width Estimand / Estimator / Estimate / 95% CI table (plus oracle)."""
    has_ci = any(r.get("ci") for r in rows)
    has_oracle = any("oracle" in r for r in rows)
    head = ["Estimand", "Estimator", "Estimate"]
    if has_ci:
        level = next(r["ci"]["level"] for r in rows if r.get("ci"))
        head.append(f"{round(100 * level)}% CI")
    if has_oracle:
        head.append("Oracle")
    body = []
    for r in rows:
        line = [r["estimand"], r["estimator"], _num(r["estimate"], digits)]
        if has_ci:
            ci = r.get("ci")
            line.append(f"({_num(ci['lo'], digits)}, {_num(ci['hi'], digits)})" if ci else "")
        if has_oracle:
            o = r.get("oracle")
            line.append(_num(o["mean"], digits) if o else "")
        body.append(line)
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    fmt = [lambda s, w: s.ljust(w), lambda s, w: s.ljust(w)] + [lambda s, w: s.rjust(w)] * 3
    out = ["  ".join(fmt[j](h, w) for j, (h, w) in enumerate(zip(head, widths)))]
    out.append("-" * len(out[0]))
    out += ["  ".join(fmt[j](c, w) for j, (c, w) in enumerate(zip(line, widths)))
            for line in body]
    return "\n".join(out)


def _items(run, ds):
    """(key, target, estimator) for every requested estimate and contrast."""
    est = run.section("estimate")
    targets = [tuple(t) for t in est.get("targets", [[0, 1]])]
    estimators = est.get("estimators", list(ESTIMATORS))
    items = []
    for t in targets:
        for e in estimators:
            items.append((target_label(t, ds.K), EstimandTarget(*t), e))
    for a_d in est.get("contrasts", []):
        for e in estimators:
            items.append((contrast_label(a_d, ds.K),
                          (EstimandTarget(1, a_d), EstimandTarget(0, a_d)), e))
    return items


def _point(ds, suite, target, e, cap):
    if isinstance(target, tuple):
        return estimate_effect(ds, suite, target, e, cap=cap)
    return estimate(ds, suite, target, e, cap=cap)


def _estimate_rows(run, ds):
    specs = run.suite(ds)
    ws = Workspace(ds, specs)
    if ws.coverage:
        raise ConfigError(f"no model for required channels {list(ws.coverage)}", path="models")
    suite = ws.fit()
    cap = run.section("estimate").get("cap")
    rows, reports = [], []
    for label, target, e in _items(run, ds):
        rep = _point(ds, suite, target, e, cap)
        rows.append({"estimand": label, "estimator": e, "estimate": rep.point})
        reports.append(rep.to_dict())
    return specs, suite, rows, reports


def _dataset_summary(ds):
    D = np.nan_to_num(ds.D, nan=-1.0)
    return {"n": ds.n, "K": ds.K, "design": ds.design, "ordering": ds.grid.ordering,
            "survivors": int(np.sum(D[:, ds.K] == 0)),
            "observed_outcomes": int(np.sum(~np.isnan(ds.Y)))}


def _bootstrap(run, ds, specs, items, rows):
    bs = run.section("bootstrap")
    plan = BootstrapPlan(int(bs.get("n_boot", 500)), run.seeds["bootstrap"],
                         float(bs.get("ci_level", 0.95)))
    reps, failures = bootstrap_many(ds, specs, [(t, e) for _, t, e in items], plan, run.threads)
    if len(failures) > MAX_FAILURE_SHARE * plan.n_boot:
        raise TooManyFailures(f"{len(failures)} of {plan.n_boot} bootstrap replicates failed; "
                              f"first: {failures[0][1]}")
    for r, msg in failures:
        log.warning("bootstrap replicate %d failed: %s", r, msg)
    ok = np.all(np.isfinite(reps), axis=1)
    for j, row in enumerate(rows):
        vals = reps[ok, j]
        lo, hi = percentile_interval(vals, plan.ci_level)
        row["ci"] = {"lo": lo, "hi": hi, "level": plan.ci_level, "method": "percentile",
                     "n_boot": plan.n_boot, "n_failed": len(failures),
                     "se": float(np.std(vals, ddof=1))}
    return plan, reps, failures


# ------------------------------------------------------------------- commands
def cmd_simulate(run):
    if "simulate" not in run.cfg:
        raise ConfigError("a [simulate] section is required", path="simulate")
    ds = run.dataset()
    os.makedirs(run.out, exist_ok=True)
    write_csv(ds, os.path.join(run.out, "dataset.csv"))
    echo = law_to_config(run.law)
    write_text(dump_toml(echo), os.path.join(run.out, "law.toml"))
    summary = _dataset_summary(ds)
    run.write("simulate", {"provenance": run.provenance("simulate"), "dataset": summary,
                           "violation": run.section("simulate").get("violation")}, None)
    print("\n".join(f"{k}: {v}" for k, v in sorted(summary.items())))
    return 0


def cmd_estimate(run):
    ds = run.dataset()
    specs, suite, rows, reports = _estimate_rows(run, ds)
    table = render_table(rows)
    run.write("estimate", {"provenance": run.provenance("estimate"),
                           "dataset": _dataset_summary(ds), "rows": rows,
                           "reports": reports, "nuisance": suite.summary()}, table)
    print(table)
    return 0


def cmd_bootstrap(run):
    ds = run.dataset()
    specs, suite, rows, reports = _estimate_rows(run, ds)
    items = _items(run, ds)
    plan, reps, failures = _bootstrap(run, ds, specs, items, rows)
    table = render_table(rows)
    payload = {"provenance": run.provenance("bootstrap"), "dataset": _dataset_summary(ds),
               "rows": rows, "reports": reports, "nuisance": suite.summary(),
               "failures": [{"replicate": r, "error": m} for r, m in failures]}
    run.write("bootstrap", payload, table)
    if run.section("bootstrap").get("dump_replicates", False):
        lines = [",".join(["replicate"] + [f"stat_{j}" for j in range(len(items))])]
        lines += [",".join([str(r)] + ["" if not np.isfinite(v) else repr(float(v))
                                       for v in reps[r]]) for r in range(len(reps))]
        write_text("\n".join(lines), os.path.join(run.out, "replicates.csv"))
    print(table)
    return 0


def cmd_diagnose(run):
    ds = run.dataset()
    dg = run.section("diagnose")
    alpha = float(dg.get("alpha", 0.05))
    correction = dg.get("correction", "bonferroni")
    default = {"TwoArm": ["positivity"], "FourArm": ["ay_isolation"],
               "SixArm": ["modified_treatment"]}[ds.design]
    reports = []
    for check in dg.get("checks", default):
        if check == "positivity":
            reports.append(check_positivity(ds))
        elif check == "ay_isolation":
            reports.append(falsify_ay_isolation(ds, alpha, correction))
        else:
            reports.append(falsify_modified_treatment(ds, alpha, correction))
    text = "\n\n".join(r.render() for r in reports)
    run.write("diagnose", {"provenance": run.provenance("diagnose"),
                           "dataset": _dataset_summary(ds),
                           "reports": [r.to_dict() for r in reports]}, text)
    print(text)
    failed = [r.check for r in reports if not r.passed]
    if failed and run.strict:
        raise DiagnosticsRejected(f"diagnostics rejected: {', '.join(failed)}")
    return 0


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def swog_config(user_cfg=None):
    """The shipped preset, with optional user overrides merged in."""
    text = preset_text("swog")
    cfg = parse_toml(text, "swog preset")
    if user_cfg:
        cfg = _merge(cfg, user_cfg)
        text = dump_toml(cfg)
    return cfg, text


def cmd_replicate_swog(run):
    ds = run.dataset()
    K = ds.K
    items = [(target_label([1], K), EstimandTarget(1, 1), "IPW"),
             (target_label([0], K), EstimandTarget(0, 0), "IPW"),
             (target_label((0, 1), K), EstimandTarget(0, 1), "OR"),
             (target_label((0, 1), K), EstimandTarget(0, 1), "IPW"),
             (target_label((0, 1), K), EstimandTarget(0, 1), "DR"),
             (contrast_label(1, K), (EstimandTarget(1, 1), EstimandTarget(0, 1)), "DR")]
    specs = run.suite(ds)
    ws = Workspace(ds, specs)
    if ws.coverage:
        raise ConfigError(f"no model for required channels {list(ws.coverage)}", path="models")
    suite = ws.fit()
    rows = []
    for label, t, e in items:
        rep = _point(ds, suite, t, e, None)
        name = "Non-parametric (IPCW)" if e == "IPW" and t.a_y == t.a_d else e
        rows.append({"estimand": label, "estimator": name, "estimate": rep.point})
    _bootstrap(run, ds, specs, items, rows)
    n_mc = int(run.section("oracle").get("n_mc", 1000000))
    law, seed = run.law, run.seeds["oracle"]
    oracle = {}
    for t in ((1, 1), (0, 0), (0, 1)):
        m, se = oracle_conditional_mean(law, *t, n_mc, seed, run.threads)
        oracle[t] = {"mean": m, "mc_se": se}
    m, se = oracle_cse(law, 1, n_mc, seed, run.threads)
    for row, key in zip(rows, [(1, 1), (0, 0), (0, 1), (0, 1), (0, 1)]):
        row["oracle"] = oracle[key]
    rows[5]["oracle"] = {"mean": m, "mc_se": se}
    table_rows, effects = rows[:5], rows[5:]
    dr = table_rows[4]
    check = dr["ci"]["lo"] <= dr["oracle"]["mean"] <= dr["ci"]["hi"]
    table = render_table(table_rows, digits=2)
    D = np.nan_to_num(ds.D, nan=-1.0)
    surv = {f"A={a}": float(np.mean(D[ds.A == a, K] == 0)) for a in (0, 1)}
    payload = {"provenance": run.provenance("replicate-swog"),
               "dataset": _dataset_summary(ds), "survival": surv,
               "rows": table_rows, "effects": effects, "nuisance": suite.summary(),
               "self_check": {"dr_ci_contains_oracle": bool(check)}}
    run.write("swog", payload, table)
    write_csv(ds, os.path.join(run.out, "swog_dataset.csv"))
    print(table)
    print(f"\nself-check: DR interval contains the oracle value: {check}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "bootstrap": cmd_bootstrap,
            "diagnose": cmd_diagnose, "replicate-swog": cmd_replicate_swog}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sepfx", description="Estimate conditional separable effects.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config file"
                       + (" (overrides the shipped preset)" if name == "replicate-swog" else ""),
                       required=name != "replicate-swog")
        p.add_argument("--out", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int,
                       help="worker threads (default: $SEPFX_THREADS or 1)")
        p.add_argument("--strict", action="store_true",
                       help="exit with status 4 when a diagnostic rejects")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replicate-swog":
            user = None
            if args.config:
                user, user_text = read_config(args.config)
                validate_config(user, user_text)
            cfg, text = swog_config(user)
            base = os.path.dirname(os.path.abspath(args.config)) if args.config else "."
        else:
            cfg, text = read_config(args.config)
            base = os.path.dirname(os.path.abspath(args.config))
        run = Run(cfg, text, args, base)
        return COMMANDS[args.command](run)
    except SepfxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
