"""File formats: wide CSV datasets, TOML configs and laws, JSON results."""

import csv
import hashlib
import json
import math
import re
from importlib import resources

import numpy as np
import tomli
import tomli_w

from .data import FOUR_ARM, TWO_ARM, Partition, TimeGrid, TrialDataset, validate_dataset
from .errors import ConfigError, DataError, SchemaError
from .identification import DiscreteLaw
from .sim import BaselineSpec, CovariateSpec, StructuralLaw

KINDS = {"TwoArm": TWO_ARM, "FourArm": FOUR_ARM}
KIND_NAMES = {v: k for k, v in KINDS.items()}


# ----------------------------------------------------------------- config text
def key_line(text, path):
    """Best-effort 1-based line of the last key of a dotted path in TOML text."""
    if not path:
        return None
    key = str(path[-1])
    pats = [rf"^\s*\[+\s*([\w.\"]*\.)?\"?{re.escape(key)}\"?\s*\]+",
            rf"^\s*\"?{re.escape(key)}\"?\s*="]
    for pat in pats:
        for i, line in enumerate(text.splitlines(), 1):
            if re.search(pat, line):
                return i
    return None


def parse_toml(text, source="config"):
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"{source}: {exc}", line=int(m.group(1)) if m else None) from None


def read_config(path):
    """Return (parsed dict, raw text) of a TOML config file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    text = raw.decode("utf-8")
    return parse_toml(text, str(path)), text


def preset_text(name):
    return resources.files("sepfx.presets").joinpath(f"{name}.toml").read_text("utf-8")


def config_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ------------------------------------------------------------------------ laws
def grid_from_config(cfg):
    try:
        return TimeGrid(int(cfg.get("K", 1)), cfg.get("ordering", "StandardCDL"))
    except (TypeError, ValueError, SchemaError) as exc:
        raise ConfigError(str(exc), path="grid") from None


def _coefs(d):
    return {str(k): float(v) for k, v in (d or {}).items()}


def law_from_config(grid, cfg):
    """Build a StructuralLaw from the [law] table of a config."""
    baseline = [BaselineSpec(b["name"], b.get("dist", "bernoulli"), float(b.get("p", 0.5)),
                             float(b.get("mean", 0.0)), float(b.get("sd", 1.0)))
                for b in cfg.get("baseline", [])]
    covs = [CovariateSpec(c["name"], c.get("block", "AD"), _coefs(c.get("coefs")))
            for c in cfg.get("covariates", [])]
    return StructuralLaw(
        grid=grid, baseline=baseline, covariates=covs, hazard=_coefs(cfg.get("hazard")),
        outcome=_coefs(cfg.get("outcome")), sigma=float(cfg.get("sigma", 1.0)),
        censor=_coefs(cfg["censor"]) if "censor" in cfg else None,
        censor_terminal_only=bool(cfg.get("censor_terminal_only", False)),
        treatment=_coefs(cfg["treatment"]) if "treatment" in cfg else None,
        monotone=bool(cfg.get("monotone", False)), violation=cfg.get("violation"),
        violation_strength=float(cfg.get("violation_strength", 2.0)))


def law_to_config(law):
    """Inverse of (grid_from_config, law_from_config) as a TOML-ready dict."""
    out = {
        "sigma": law.sigma, "censor_terminal_only": law.censor_terminal_only,
        "monotone": law.monotone, "violation_strength": law.violation_strength,
        "baseline": [{"name": b.name, "dist": b.dist, "p": b.p, "mean": b.mean, "sd": b.sd}
                     for b in law.baseline],
        "covariates": [{"name": c.name, "block": c.block, "coefs": dict(c.coefs)}
                       for c in law.covariates],
        "hazard": dict(law.hazard), "outcome": dict(law.outcome),
    }
    if law.censor is not None:
        out["censor"] = dict(law.censor)
    if law.treatment is not None:
        out["treatment"] = dict(law.treatment)
    if law.violation is not None:
        out["violation"] = law.violation
    return {"grid": {"K": law.K, "ordering": law.grid.ordering}, "law": out}


def dump_toml(obj):
    return tomli_w.dumps(obj)


def discrete_law_to_dict(law):
    def arr(a):
        return [None if isinstance(x, float) and math.isnan(x) else x
                for x in np.asarray(a, dtype=float).ravel().tolist()]

    def tab(a):
        a = np.asarray(a, dtype=float)
        return {"shape": list(a.shape), "values": arr(a)}

    return {"grid": {"K": law.K, "ordering": law.grid.ordering},
            "l0_support": tab(law.l0_support), "l0_prob": tab(law.l0_prob),
            "treat_prob": tab(law.treat_prob), "c_haz": [tab(t) for t in law.c_haz],
            "d_haz": [tab(t) for t in law.d_haz], "l_joint": [tab(t) for t in law.l_joint],
            "y_mean": tab(law.y_mean), "covariate_names": list(law.covariate_names),
            "baseline_names": list(law.baseline_names),
            "partition": {"ay": list(law.partition.ay), "ad": list(law.partition.ad)}}


def discrete_law_from_dict(d):
    def tab(t):
        vals = [np.nan if v is None else v for v in t["values"]]
        return np.asarray(vals, dtype=float).reshape(t["shape"])

    g = d["grid"]
    return DiscreteLaw(TimeGrid(g["K"], g["ordering"]), tab(d["l0_support"]), tab(d["l0_prob"]),
                       tab(d["treat_prob"]), tuple(tab(t) for t in d["c_haz"]),
                       tuple(tab(t) for t in d["d_haz"]), tuple(tab(t) for t in d["l_joint"]),
                       tab(d["y_mean"]), tuple(d["covariate_names"]),
                       Partition(tuple(d["partition"]["ay"]), tuple(d["partition"]["ad"])),
                       tuple(d["baseline_names"]))


# ------------------------------------------------------------------------- CSV
def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def _fmt_ind(v):
    return "" if math.isnan(v) else str(int(v))


def csv_header(ds):
    K = ds.K
    cols = ["id"] + [f"L0_{b}" for b in ds.baseline_names]
    cols += {"TwoArm": ["A"], "FourArm": ["AY", "AD"],
             "SixArm": ["ARM_KIND", "A", "AY", "AD"]}[ds.design]
    cols += [f"C_{k}" for k in range(1, K + 2)] + [f"D_{k}" for k in range(1, K + 2)]
    cols += [f"L{k}_{c}" for k in range(1, K + 1) for c in ds.covariate_names]
    return cols + ["Y"]


def dataset_rows(ds):
    K, q = ds.K, ds.q
    for i in range(ds.n):
        row = [ds.ids[i]] + [_fmt(v) for v in ds.L0[i]]
        ay, ad = str(int(ds.a_y[i])), str(int(ds.a_d[i]))
        if ds.design == "TwoArm":
            row.append(ay)
        elif ds.design == "FourArm":
            row += [ay, ad]
        else:
            two = ds.kind[i] == TWO_ARM
            row += [KIND_NAMES[int(ds.kind[i])], ay if two else "", "" if two else ay,
                    "" if two else ad]
        row += [_fmt_ind(v) for v in ds.C[i]] + [_fmt_ind(v) for v in ds.D[i]]
        row += [_fmt_ind(ds.L[i, k, c]) for k in range(K) for c in range(q)]
        row.append(_fmt(ds.Y[i]))
        yield row


def write_csv(ds, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(ds))
        w.writerows(dataset_rows(ds))


def _parse_cell(text, where, indicator=False):
    text = text.strip()
    if text == "":
        return np.nan
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{where}: cannot parse {text!r} as a number") from None
    if indicator and v not in (0.0, 1.0):
        raise DataError(f"{where}: indicator must be 0 or 1, got {text!r}")
    return v


def read_csv(path, ordering="StandardCDL", partition=None, validate=True):
    """Read a wide-format CSV into a TrialDataset.

    K, the design and the covariate names are inferred from the header.
    Raises DataError on malformed files or when validation finds violations.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, a header is required") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    if not header or header[0] != "id":
        raise DataError(f"{path}: the first column must be 'id'")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    col = {h: j for j, h in enumerate(header)}
    if "Y" not in col:
        raise DataError(f"{path}: missing column 'Y'")
    d_cols = sorted((int(h[2:]) for h in header if re.fullmatch(r"D_\d+", h)))
    if not d_cols or d_cols != list(range(1, len(d_cols) + 1)):
        raise DataError(f"{path}: D columns must be D_1..D_(K+1)")
    K = len(d_cols) - 1
    for k in range(1, K + 2):
        if f"C_{k}" not in col:
            raise DataError(f"{path}: missing column 'C_{k}'")
    if "ARM_KIND" in col:
        design = "SixArm"
    elif "AY" in col and "AD" in col:
        design = "FourArm"
    elif "A" in col:
        design = "TwoArm"
    else:
        raise DataError(f"{path}: no treatment columns (A, or AY and AD)")
    baseline = [h[3:] for h in header if h.startswith("L0_")]
    covs = []
    for h in header:
        m = re.fullmatch(r"L(\d+)_(\w+)", h)
        if m and m.group(1) != "0":
            if not 1 <= int(m.group(1)) <= K:
                raise DataError(f"{path}: column {h!r} outside 1..K")
            if m.group(2) not in covs:
                covs.append(m.group(2))
    for k in range(1, K + 1):
        for c in covs:
            if f"L{k}_{c}" not in col:
                raise DataError(f"{path}: missing column 'L{k}_{c}'")
    n = len(rows)
    L0 = np.zeros((n, len(baseline)))
    a_y, a_d = np.zeros(n), np.zeros(n)
    kind = np.full(n, TWO_ARM if design == "TwoArm" else FOUR_ARM, dtype=np.int8)
    D, C = np.zeros((n, K + 1)), np.zeros((n, K + 1))
    L, Y = np.zeros((n, K, len(covs))), np.zeros(n)
    ids = []
    for i, r in enumerate(rows):
        line = i + 2
        if len(r) != len(header):
            raise DataError(f"{path}, line {line}: expected {len(header)} fields, got {len(r)}")

        def get(name, indicator=False):
            return _parse_cell(r[col[name]], f"{path}, line {line}, column {name}", indicator)

        ids.append(r[0].strip())
        for j, b in enumerate(baseline):
            L0[i, j] = get(f"L0_{b}")
        if design == "TwoArm":
            a_y[i] = a_d[i] = get("A", True)
        elif design == "FourArm":
            a_y[i], a_d[i] = get("AY", True), get("AD", True)
        else:
            k_name = r[col["ARM_KIND"]].strip()
            if k_name not in KINDS:
                raise DataError(f"{path}, line {line}: ARM_KIND must be TwoArm or FourArm")
            kind[i] = KINDS[k_name]
            if kind[i] == TWO_ARM:
                a_y[i] = a_d[i] = get("A", True)
            else:
                a_y[i], a_d[i] = get("AY", True), get("AD", True)
        if np.isnan(a_y[i]) or np.isnan(a_d[i]):
            raise DataError(f"{path}, line {line}: treatment value is missing")
        for k in range(K + 1):
            C[i, k] = get(f"C_{k + 1}", True)
            D[i, k] = get(f"D_{k + 1}", True)
        for k in range(K):
            for c, name in enumerate(covs):
                L[i, k, c] = get(f"L{k + 1}_{name}")
        Y[i] = get("Y")
    grid = TimeGrid(K, ordering)
    if partition is not None and not isinstance(partition, Partition):
        partition = Partition(tuple(partition.get("ay", ())), tuple(partition.get("ad", ())))
    ds = TrialDataset(grid=grid, L0=L0, a_y=a_y, a_d=a_d, D=D, C=C, L=L, Y=Y, ids=ids,
                      kind=kind, design=design, baseline_names=tuple(baseline),
                      covariate_names=tuple(covs), partition=partition)
    if validate:
        bad = validate_dataset(ds)
        if bad:
            first = bad[0]
            raise DataError(f"{path}: {len(bad)} record violations; first: record "
                            f"{first.record_id}, field {first.field}: {first.rule}")
    return ds


# ------------------------------------------------------------------------ JSON
def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def to_json(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(to_json(obj))


def write_text(text, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")
