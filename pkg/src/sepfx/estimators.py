"""Outcome-regression, weighted and doubly robust estimators of nu_{aY,aD}.

All three estimating equations are linear in nu and are solved in closed
form.  Per-individual quantities (with A the two-arm treatment):

* ``w`` for uncensored survivors in arm a_Y: event-survival ratio (a_D over
  a_Y), A_D-block covariate density ratio, inverse probability of remaining
  uncensored, divided by P(A=a_Y | L0);
* ``v`` for observed survivors in arm a_D: A_Y-block covariate density
  ratio (a_Y over a_D) times the inverse probability of remaining uncensored
  up to the observation of D_{K+1}, divided by P(A=a_D | L0);
* ``m`` the outcome-model prediction at A=a_Y.

OR solves sum v (m - nu) = 0, IPW solves sum w (Y - nu) = 0 and DR solves
(sum v m + sum w (Y - m)) / sum v - nu = 0.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ExtremePositivity, MismatchedAD, MissingNuisance, NoSurvivors
from .nuisance import NuisanceSuiteFit, Workspace

ESTIMATORS = ("OR", "IPW", "DR")
DENOMINATOR_FLOOR = 1e-6


@dataclass(frozen=True)
class EstimandTarget:
    a_y: int
    a_d: int

    def __post_init__(self):
        if self.a_y not in (0, 1) or self.a_d not in (0, 1):
            raise ValueError("treatment components must be 0 or 1")

    def label(self):
        return f"E(Y^(aY={self.a_y},aD={self.a_d}) | D^(aY={self.a_y},aD={self.a_d})_(K+1)=0)"


@dataclass(frozen=True, eq=False)
class EstimateReport:
    target: object
    estimator: str
    point: float
    n_effective: float
    weight_summary: dict
    nuisance: object = None
    ci: dict = None
    if_mean: float = None
    ee_residual: float = 0.0
    n_contributing: int = 0
    extra: dict = field(default_factory=dict)

    def with_ci(self, ci):
        return EstimateReport(self.target, self.estimator, self.point, self.n_effective,
                              self.weight_summary, self.nuisance, ci, self.if_mean,
                              self.ee_residual, self.n_contributing, dict(self.extra))

    def to_dict(self):
        t = self.target
        if isinstance(t, tuple):
            target = {"contrast": [{"a_y": x.a_y, "a_d": x.a_d} for x in t]}
        else:
            target = {"a_y": t.a_y, "a_d": t.a_d}
        out = {
            "target": target,
            "estimator": self.estimator,
            "point": float(self.point),
            "n_effective": float(self.n_effective),
            "n_contributing": int(self.n_contributing),
            "weight_summary": {k: float(v) for k, v in self.weight_summary.items()},
            "ee_residual": float(self.ee_residual),
            "ci": self.ci,
        }
        if self.if_mean is not None:
            out["if_mean"] = float(self.if_mean)
        if isinstance(self.nuisance, NuisanceSuiteFit):
            out["nuisance"] = self.nuisance.summary()
        return out


def _summary(w):
    if len(w) == 0:
        return {"min": float("nan"), "max": float("nan"), "mean": float("nan"),
                "p99": float("nan")}
    return {"min": float(np.min(w)), "max": float(np.max(w)), "mean": float(np.mean(w)),
            "p99": float(np.percentile(w, 99))}


def _kish(w, fw):
    s1 = float(np.sum(fw * w))
    s2 = float(np.sum(fw * w * w))
    return s1 * s1 / s2 if s2 > 0 else 0.0


def _workspace(ds, suite):
    ws = suite.workspace
    if ws is None or ws.ds is not ds:
        ws = Workspace(ds, suite.specs)
    return ws


def _require(ws, suite, needs):
    for resp in needs:
        if resp in ws.coverage or not suite.has(resp):
            raise MissingNuisance(f"no fitted model for channel {resp}")


class _Pieces:
    """Per-individual weights and predictions for one target."""

    def __init__(self, ws, suite, target, fw, needs, cap=None):
        _require(ws, suite, needs)
        ds = ws.ds
        a_y, a_d = target.a_y, target.a_d
        ev = ws.evaluate(suite, a_y, a_d)
        A = ds.A
        self.fw = fw
        self.IY = (A == a_y) & ws.y_obs
        self.ID = (A == a_d) & ws.surv_obs
        ad_block, ay_block = ds.partition.ad, ds.partition.ay
        zero = np.zeros(ds.n)

        def f_sum(a, names):
            return sum((ev["logF"][a].get(c, zero) for c in names), zero)

        logS = ev["logS"]
        log_wd = (logS[a_d] - logS[a_y]) if logS else zero
        self.log_w = log_wd + f_sum(a_d, ad_block) - f_sum(a_y, ad_block) - ev["logPC_all"][a_y]
        self.log_v = f_sum(a_y, ay_block) - f_sum(a_d, ay_block) - ev["logPC_obs"][a_d]
        pi_y, modelled_y = ws.propensity(suite, a_y, fw)
        pi_d, _ = ws.propensity(suite, a_d, fw)
        share_y = float(np.sum(fw * (A == a_y)) / np.sum(fw))
        # an arm emptied by resampling weights is reported later as NoSurvivors
        with np.errstate(divide="ignore", invalid="ignore"):
            self.w = np.exp(self.log_w) / pi_y
            self.v = np.exp(self.log_v) / pi_d
            # realized weights exclude the constant sample-share factor
            self.w_realized = np.exp(self.log_w) * (share_y / pi_y if modelled_y else 1.0)
        if cap is not None:
            self._truncate(cap)
        self.min_den = np.minimum(ev["min_den"][a_y], pi_y)
        self.m = ev["m"]
        self.Y = ds.Y

    def _truncate(self, cap):
        """Clip weights at their cap-th percentile among contributing rows."""
        for name, sel in (("w", self.IY), ("v", self.ID)):
            arr = getattr(self, name)
            if sel.any():
                top = np.percentile(arr[sel], cap)
                setattr(self, name, np.minimum(arr, top))
        top = np.percentile(self.w_realized[self.IY], cap) if self.IY.any() else np.inf
        self.w_realized = np.minimum(self.w_realized, top)

    def check_positivity(self):
        sel = self.IY & (self.fw > 0)
        if np.any(self.min_den[sel] < DENOMINATOR_FLOOR):
            raise ExtremePositivity(
                f"a weight denominator probability fell below {DENOMINATOR_FLOOR:g}")


def _or(p):
    sel = p.ID & (p.fw > 0)
    if not sel.any():
        raise NoSurvivors("no observed survivors in the a_D arm")
    vw = p.fw[sel] * p.v[sel]
    nu = float(np.sum(vw * p.m[sel]) / np.sum(vw))
    resid = float(np.sum(vw * (p.m[sel] - nu)) / np.sum(p.fw))
    return nu, p.v[sel], sel, resid


def _ipw(p):
    sel = p.IY & (p.fw > 0)
    if not sel.any():
        raise NoSurvivors("no uncensored survivors in the a_Y arm")
    p.check_positivity()
    ww = p.fw[sel] * p.w[sel]
    nu = float(np.sum(ww * p.Y[sel]) / np.sum(ww))
    resid = float(np.sum(ww * (p.Y[sel] - nu)) / np.sum(p.fw))
    return nu, sel, resid


def _dr(p):
    sd = p.ID & (p.fw > 0)
    sy = p.IY & (p.fw > 0)
    if not sd.any():
        raise NoSurvivors("no observed survivors in the a_D arm")
    if not sy.any():
        raise NoSurvivors("no uncensored survivors in the a_Y arm")
    p.check_positivity()
    N = float(np.sum(p.fw))
    beta = float(np.sum(p.fw[sd] * p.v[sd])) / N
    term = np.zeros(len(p.fw))
    term[sd] += p.v[sd] * p.m[sd]
    term[sy] += p.w[sy] * (p.Y[sy] - p.m[sy])
    nu = float(np.sum(p.fw * term) / N / beta)
    phi = term / beta - nu
    if_mean = float(np.sum(p.fw * phi) / N)
    return nu, if_mean, sy


def _run(ws, suite, target, estimator, fw, cap=None):
    needs = {"OR": ["Y"], "IPW": ["D"], "DR": ["Y", "D"]}[estimator]
    p = _Pieces(ws, suite, target, fw, needs, cap)
    if estimator == "OR":
        nu, v, sel, resid = _or(p)
        return EstimateReport(target, "OR", nu, _kish(v, p.fw[sel]),
                              _summary(np.exp(p.log_v[sel])),
                              suite, ee_residual=resid, n_contributing=int(sel.sum()))
    if estimator == "IPW":
        nu, sel, resid = _ipw(p)
        w = p.w_realized[sel]
        return EstimateReport(target, "IPW", nu, _kish(w, p.fw[sel]), _summary(w), suite,
                              ee_residual=resid, n_contributing=int(sel.sum()))
    nu, if_mean, sy = _dr(p)
    w = p.w_realized[sy]
    return EstimateReport(target, "DR", nu, _kish(w, p.fw[sy]), _summary(w), suite,
                          if_mean=if_mean, ee_residual=if_mean, n_contributing=int(sy.sum()))


def _weights(ds, weights):
    return np.ones(ds.n) if weights is None else np.asarray(weights, dtype=float)


def estimate_or(ds, suite, t, weights=None):
    """Outcome-regression estimator."""
    return _run(_workspace(ds, suite), suite, t, "OR", _weights(ds, weights))


def estimate_ipw(ds, suite, t, weights=None):
    """Weighted (inverse-probability) estimator."""
    return _run(_workspace(ds, suite), suite, t, "IPW", _weights(ds, weights))


def estimate_dr(ds, suite, t, weights=None):
    """Doubly robust estimator; the report carries the influence-function mean."""
    return _run(_workspace(ds, suite), suite, t, "DR", _weights(ds, weights))


def estimate(ds, suite, t, estimator, weights=None, cap=None):
    """Dispatch by estimator name.

    ``cap`` optionally truncates weights at that percentile (off by default).
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    if cap is not None and not 0 < cap <= 100:
        raise ValueError("cap must be a percentile in (0, 100]")
    return _run(_workspace(ds, suite), suite, t, estimator, _weights(ds, weights), cap)


def estimate_effect(ds, suite, pair, estimator, weights=None, cap=None):
    """Difference of two targets sharing a_D, with shared nuisance fits."""
    t1, t0 = pair
    if t1.a_d != t0.a_d:
        raise MismatchedAD("both targets of an effect must share a_D")
    r1 = estimate(ds, suite, t1, estimator, weights, cap)
    r0 = estimate(ds, suite, t0, estimator, weights, cap)
    return EstimateReport((t1, t0), estimator, r1.point - r0.point,
                          min(r1.n_effective, r0.n_effective), r1.weight_summary, suite,
                          ee_residual=r1.ee_residual - r0.ee_residual,
                          n_contributing=r1.n_contributing,
                          extra={"components": [r1.point, r0.point]})


def survivor_mean(ds, suite, a, weights=None):
    """Factual survivor mean in arm a, inverse-censoring weighted when needed.

    This is the IPW estimator at a_Y = a_D = a; without censoring it is the
    plain mean of Y among survivors with A = a.
    """
    return estimate_ipw(ds, suite, EstimandTarget(a, a), weights)


def complete_cases(ds):
    """Drop every record with a censored outcome (an unadjusted analysis)."""
    return ds.subset(np.nan_to_num(ds.C[:, ds.K], nan=0.0) == 0)
