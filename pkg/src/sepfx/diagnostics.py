"""Positivity audit and falsification tests for component-arm trials.

The falsification tests compare observable means that must coincide when
the component assumptions hold.  Event comparisons use risk-set
proportions (D_{k+1} among D_k = 0, C_{k+1} = 0) with a continuity-
corrected two-proportion z-test; outcome comparisons use Welch's test.
The overall verdict applies a Bonferroni correction across all cells.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import FOUR_ARM, TWO_ARM
from .errors import InsufficientData, SchemaError

MIN_STRATUM = 10
CORRECTIONS = ("bonferroni", "none")


@dataclass(frozen=True, eq=False)
class DiagnosticReport:
    check: str
    rows: list
    p_value: float = None
    statistic: float = None
    alpha: float = None
    rejected: bool = False
    flagged: list = field(default_factory=list)
    correction: str = "bonferroni"

    @property
    def passed(self):
        return not self.rejected and not self.flagged

    def to_dict(self):
        return {"check": self.check, "rows": self.rows, "p_value": self.p_value,
                "statistic": self.statistic, "alpha": self.alpha, "rejected": self.rejected,
                "correction": self.correction,
                "flagged": [list(f) if isinstance(f, tuple) else f for f in self.flagged]}

    def render(self):
        lines = [f"check: {self.check}"]
        if self.rows:
            cols = list(self.rows[0].keys())
            cells = [[_fmt(r[c]) for c in cols] for r in self.rows]
            widths = [max(len(c), *(len(row[j]) for row in cells)) for j, c in enumerate(cols)]
            lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
            lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
        if self.p_value is not None:
            lines.append(f"overall p-value ({self.correction}): {_fmt(self.p_value)}"
                         f"  alpha: {_fmt(self.alpha)}  rejected: {self.rejected}")
        if self.check == "positivity":
            lines.append(f"flagged cells: {len(self.flagged)}")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "(" + ",".join(_fmt(x) for x in v) + ")"
    return str(v)


# ------------------------------------------------------------------ positivity
def _as_key(row):
    return tuple(int(v) if float(v).is_integer() else float(v) for v in row)


def _group_counts(ds, mask, k):
    """Counts per (history, arm) among rows in mask."""
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return {}
    hist = np.column_stack([ds.L0[idx], ds.L[idx, :k].reshape(len(idx), -1)])
    uniq, inv = np.unique(hist, axis=0, return_inverse=True)
    inv = inv.ravel()
    arm = ds.a_y[idx].astype(int)
    counts = np.zeros((len(uniq), 2), dtype=int)
    np.add.at(counts, (inv, arm), 1)
    return {_as_key(u): [int(c[0]), int(c[1])] for u, c in zip(uniq, counts)}


def check_positivity(ds):
    """Count each arm in every observed history cell and flag empty arms.

    Reported cells are the histories (baseline values, L_1..L_k) of rows
    with D_{k+1} = C_{k+1} = 0.  Besides those ``arm`` cells, baseline cells
    with a single arm (``treatment``) and histories where every entering
    row of an arm is censored (``censoring``) are flagged.
    """
    if ds.design != "TwoArm":
        raise SchemaError("positivity is checked on two-arm data")
    rows, flagged = [], []
    if ds.n == 0:
        return DiagnosticReport("positivity", rows)
    K = ds.K
    D = np.nan_to_num(ds.D, nan=-1.0)
    C = np.nan_to_num(ds.C, nan=0.0)
    for h, (n0, n1) in sorted(_group_counts(ds, np.ones(ds.n, dtype=bool), 0).items()):
        for a, cnt in ((0, n0), (1, n1)):
            if cnt == 0:
                flagged.append((0, h, a, "treatment"))
    ones = np.ones(ds.n, dtype=bool)
    for k in range(K + 1):
        entered = ones if k == 0 else (D[:, k - 1] == 0) & (C[:, k - 1] == 0)
        if ds.grid.terminal_d_first and k == K:
            reach = entered & (D[:, k] == 0)
        else:
            reach = entered
        kept = reach & (C[:, k] == 0)
        reach_counts = _group_counts(ds, reach, k)
        kept_counts = _group_counts(ds, kept, k)
        for h, (r0, r1) in sorted(reach_counts.items()):
            k0, k1 = kept_counts.get(h, (0, 0))
            for a, r, kk in ((0, r0, k0), (1, r1, k1)):
                if r > 0 and kk == 0:
                    flagged.append((k, h, a, "censoring"))
        at = kept & (D[:, k] == 0)
        for h, (n0, n1) in sorted(_group_counts(ds, at, k).items()):
            flag = n0 == 0 or n1 == 0
            rows.append({"k": k, "history": list(h), "n_A0": n0, "n_A1": n1, "flagged": flag})
            for a, cnt in ((0, n0), (1, n1)):
                if cnt == 0:
                    flagged.append((k, h, a, "arm"))
    flagged.sort(key=lambda t: (t[0], t[1], t[2], t[3]))
    return DiagnosticReport("positivity", rows, flagged=flagged)


# ------------------------------------------------------------- test statistics
def two_proportion_test(x1, n1, x0, n0):
    """Continuity-corrected two-sided z-test; returns (z, p)."""
    p1, p0 = x1 / n1, x0 / n0
    pool = (x1 + x0) / (n1 + n0)
    var = pool * (1 - pool) * (1 / n1 + 1 / n0)
    if var <= 0:
        return 0.0, 1.0
    z = max(abs(p1 - p0) - 0.5 * (1 / n1 + 1 / n0), 0.0) / np.sqrt(var)
    return float(z), float(min(1.0, 2 * stats.norm.sf(z)))


def welch_test(y1, y0):
    """Welch's two-sample t-test; returns (t, p)."""
    if np.var(y1) == 0 and np.var(y0) == 0:
        return 0.0, 1.0 if np.mean(y1) == np.mean(y0) else 0.0
    res = stats.ttest_ind(y1, y0, equal_var=False)
    return float(abs(res.statistic)), float(res.pvalue)


def _verdict(check, rows, alpha, correction):
    if correction not in CORRECTIONS:
        raise ValueError(f"unknown correction {correction!r}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    ps = [r["p_value"] for r in rows]
    m = len(ps) if correction == "bonferroni" else 1
    p_min = min(ps)
    overall = float(min(1.0, m * p_min))
    stat = float(max(r["statistic"] for r in rows))
    return DiagnosticReport(check, rows, overall, stat, alpha, bool(overall < alpha),
                            correction=correction)


def _risk_set(ds, k):
    """Rows at risk of D_{k+1}: D_k = 0 and the censoring check before D passed."""
    D = np.nan_to_num(ds.D, nan=-1.0)
    C = np.nan_to_num(ds.C, nan=0.0)
    alive = np.ones(ds.n, dtype=bool) if k == 0 else D[:, k - 1] == 0
    if ds.grid.terminal_d_first and k == ds.K:
        uncens = np.ones(ds.n, dtype=bool) if k == 0 else C[:, k - 1] == 0
    else:
        uncens = C[:, k] == 0
    return alive & uncens, D[:, k] == 1


def _compare_events(label, g1, g0, event):
    n1, n0 = int(g1.sum()), int(g0.sum())
    if n1 < MIN_STRATUM or n0 < MIN_STRATUM:
        raise InsufficientData(f"{label}: fewer than {MIN_STRATUM} at-risk individuals")
    x1, x0 = int(event[g1].sum()), int(event[g0].sum())
    z, p = two_proportion_test(x1, n1, x0, n0)
    return {"n_1": n1, "n_0": n0, "mean_1": x1 / n1, "mean_0": x0 / n0,
            "statistic": z, "p_value": p}


def falsify_ay_isolation(ds, alpha=0.05, correction="bonferroni"):
    """Test that D_{k+1} risk-set proportions do not depend on a_Y given a_D."""
    four = ds.kind == FOUR_ARM
    if ds.design == "TwoArm" or not four.any():
        raise SchemaError("A_Y isolation is tested on component-arm (four-arm) records")
    rows = []
    for k in range(ds.K + 1):
        risk, event = _risk_set(ds, k)
        for a_d in (0, 1):
            base = four & risk & (ds.a_d == a_d)
            res = _compare_events(f"k={k}, a_D={a_d}", base & (ds.a_y == 1),
                                  base & (ds.a_y == 0), event)
            rows.append({"variable": f"D_{k + 1}", "a_D": a_d, **res})
    return _verdict("ay_isolation", rows, alpha, correction)


def falsify_modified_treatment(ds, alpha=0.05, correction="bonferroni"):
    """Test that arm (a_Y=a, a_D=a) reproduces arm A=a for Y and every D_{k+1}."""
    if ds.design != "SixArm":
        raise SchemaError("the modified treatment assumption is tested on six-arm data")
    four, two = ds.kind == FOUR_ARM, ds.kind == TWO_ARM
    rows = []
    D = np.nan_to_num(ds.D, nan=-1.0)
    C = np.nan_to_num(ds.C, nan=0.0)
    for a in (0, 1):
        joint = four & (ds.a_y == a) & (ds.a_d == a)
        plain = two & (ds.a_y == a)
        for k in range(ds.K + 1):
            risk, event = _risk_set(ds, k)
            res = _compare_events(f"D_{k + 1}, a={a}", joint & risk, plain & risk, event)
            rows.append({"variable": f"D_{k + 1}", "a": a, **res})
        obs = (D[:, ds.K] == 0) & (C[:, ds.K] == 0)
        y1, y0 = ds.Y[joint & obs], ds.Y[plain & obs]
        if len(y1) < MIN_STRATUM or len(y0) < MIN_STRATUM:
            raise InsufficientData(f"Y, a={a}: fewer than {MIN_STRATUM} uncensored survivors")
        t, p = welch_test(y1, y0)
        rows.append({"variable": "Y", "a": a, "n_1": len(y1), "n_0": len(y0),
                     "mean_1": float(np.mean(y1)), "mean_0": float(np.mean(y0)),
                     "statistic": t, "p_value": p})
    return _verdict("modified_treatment", rows, alpha, correction)
