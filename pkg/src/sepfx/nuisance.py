"""Nuisance models: pooled hazards, covariate densities, censoring, outcome.

Binary channels use a logistic model fitted by safeguarded Newton-Raphson;
the outcome uses weighted least squares.  All fits accept nonnegative row
weights so that bootstrap replicates can be expressed as frequency weights
on the original rows.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (ConfigError, MissingPredictor, NoRiskSet, NonConvergence, RankDeficient,
                     SepfxError, Separation)
from .formula import ModelSpec, fixed_time, parse_formula, term_vars

TOL = 1e-8
MAX_ITER = 100
SEPARATION_BOUND = 30.0


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    spec: ModelSpec
    columns: tuple
    coefficients: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    n_used: float
    max_score: float
    stratum: object = None

    def linear_predictor(self, X):
        return X @ self.coefficients

    def predict_matrix(self, X):
        eta = self.linear_predictor(X)
        return expit(eta) if self.spec.link == "logit" else eta

    def summary(self):
        return {
            "formula": self.spec.formula,
            "stratum": self.stratum,
            "columns": list(self.columns),
            "coefficients": [float(b) for b in self.coefficients],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "loglik": float(self.loglik),
            "n_used": float(self.n_used),
        }


@dataclass(frozen=True, eq=False)
class ChannelFit:
    """Fits of one channel; a single fit, or one per arm when stratified."""

    spec: ModelSpec
    fits: dict

    @property
    def converged(self):
        return all(f.converged for f in self.fits.values())

    def fit_for(self, arm):
        return self.fits[arm] if self.spec.stratify_by_arm else self.fits[None]

    def summary(self):
        return [f.summary() for _, f in sorted(self.fits.items(), key=lambda kv: str(kv[0]))]


# ---------------------------------------------------------------- fitting core

def _check_rank(X):
    if X.shape[0] < X.shape[1] or np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficient(f"design matrix with {X.shape[1]} columns is rank deficient")


def _logit_loglik(X, y, w, beta):
    eta = X @ beta
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def _standardized(beta, X, w):
    """Coefficients re-expressed for centred, unit-variance predictors."""
    wsum = w.sum()
    mean = (w @ X) / wsum
    sd = np.sqrt(np.maximum((w @ (X - mean) ** 2) / wsum, 0.0))
    const = sd < 1e-12
    out = beta * np.where(const, 0.0, sd)
    if const.any():
        shift = float(np.sum(np.where(const, 0.0, beta * mean)))
        out = np.where(const, beta * np.where(const, mean, 0.0) + shift, out)
    return out


def fit_logit(X, y, weights=None, tol=TOL, max_iter=MAX_ITER):
    """Weighted logistic MLE; returns (beta, converged, iterations, loglik, max_score)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    keep = w > 0
    X, y, w = X[keep], y[keep], w[keep]
    if len(y) == 0:
        raise NoRiskSet("no rows with positive weight")
    _check_rank(X)
    beta = np.zeros(X.shape[1])
    ll = _logit_loglik(X, y, w, beta)
    converged = False
    it = 0
    polished = False
    while it < max_iter:
        p = expit(X @ beta)
        score = X.T @ (w * (y - p))
        if np.max(np.abs(score)) < tol:
            if polished:
                converged = True
                break
            polished = True
        it += 1
        info = X.T @ (X * (w * p * (1.0 - p))[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise Separation("information matrix became singular") from None
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = _logit_loglik(X, y, w, cand)
            if ll_new >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        if polished and ll_new < ll:
            converged = True
            break
        beta, ll = cand, ll_new
        if np.max(np.abs(_standardized(beta, X, w))) > SEPARATION_BOUND:
            raise Separation("a coefficient diverged beyond the separation bound")
    p = expit(X @ beta)
    max_score = float(np.max(np.abs(X.T @ (w * (y - p)))))
    converged = converged or max_score < tol
    return beta, converged, it, ll, max_score


def fit_identity(X, y, weights=None):
    """Weighted least squares; returns (beta, converged, iterations, loglik, max_score)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    keep = w > 0
    X, y, w = X[keep], y[keep], w[keep]
    if len(y) == 0:
        raise NoRiskSet("no rows with positive weight")
    _check_rank(X)
    sw = np.sqrt(w)
    beta = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
    # one refinement step on the normal equations tightens the score
    resid = y - X @ beta
    beta = beta + np.linalg.solve(X.T @ (X * w[:, None]), X.T @ (w * resid))
    resid = y - X @ beta
    rss = float(w @ resid ** 2)
    wsum = float(w.sum())
    sigma2 = max(rss / wsum, 1e-300)
    ll = -0.5 * wsum * (np.log(2 * np.pi * sigma2) + 1.0)
    max_score = float(np.max(np.abs(X.T @ (w * resid))))
    return beta, True, 1, ll, max_score


# ---------------------------------------------------------- risk sets, designs

def history_array(ds):
    """(n, K+1, q) array H with H[:, 0] = 0 and H[:, k] = L_k carried forward."""
    n, K, q = ds.n, ds.K, ds.q
    H = np.zeros((n, K + 1, q))
    for k in range(1, K + 1):
        cur = ds.L[:, k - 1, :]
        H[:, k, :] = np.where(np.isnan(cur), H[:, k - 1, :], cur)
    return H


def structural_zero_times(ds):
    """Intervals with no censoring event anywhere in the data."""
    return tuple(k for k in range(ds.K + 1) if not np.any(ds.C[:, k] == 1))


def risk_rows(ds, response, exclude_times=()):
    """Person-time rows (i, k) at risk for a response, with the response values.

    ``response`` is one of "D", "C", "Y", "A" or "L_<name>".
    """
    K = ds.K
    D = np.nan_to_num(ds.D, nan=-1.0)
    C = np.nan_to_num(ds.C, nan=0.0)
    terminal = ds.grid.terminal_d_first
    n = ds.n

    def prev(arr, k):
        return arr[:, k - 1] if k > 0 else np.zeros(n)

    rows_i, rows_k, ys = [], [], []
    if response == "A":
        if ds.design != "TwoArm":
            raise NoRiskSet("treatment model needs two-arm data")
        return np.arange(n), np.zeros(n, dtype=int), ds.A.astype(float)
    if response == "Y":
        idx = np.flatnonzero((D[:, K] == 0) & (C[:, K] == 0))
        return idx, np.full(len(idx), K), ds.Y[idx].astype(float)
    for k in range(K + 1):
        if k in exclude_times:
            continue
        if response == "D":
            if terminal and k == K:
                mask = (prev(D, k) == 0) & (prev(C, k) == 0)
            else:
                mask = (prev(D, k) == 0) & (C[:, k] == 0)
            y = D[:, k]
        elif response == "C":
            if terminal and k == K:
                mask = (D[:, k] == 0) & (prev(C, k) == 0)
            else:
                mask = (prev(D, k) == 0) & (prev(C, k) == 0)
            y = C[:, k]
        elif response.startswith("L_"):
            if k == K:
                continue
            c = ds.covariate_names.index(response[2:])
            mask = (D[:, k] == 0) & (C[:, k] == 0)
            y = ds.L[:, k, c]
        else:
            raise ConfigError(f"unknown response {response!r}")
        idx = np.flatnonzero(mask)
        rows_i.append(idx)
        rows_k.append(np.full(len(idx), k))
        ys.append(y[idx])
    if not rows_i:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0)
    return (np.concatenate(rows_i), np.concatenate(rows_k).astype(int),
            np.concatenate(ys).astype(float))


class RowContext:
    """Variable lookup for person-time rows of a dataset."""

    def __init__(self, ds, rows_i, rows_k, arm=None, H=None):
        self.ds = ds
        self.rows_i = rows_i
        self.rows_k = rows_k
        self.arm = arm
        self.H = history_array(ds) if H is None else H

    def get(self, var):
        ds, i, k = self.ds, self.rows_i, self.rows_k
        m = len(i)
        if var == "A":
            if self.arm is not None:
                return np.full(m, float(self.arm))
            return ds.a_y[i].astype(float)
        if var == "T":
            return k.astype(float)
        if var.startswith("T_"):
            return (k == int(var[2:])).astype(float)
        if var.startswith("L0_"):
            return ds.L0[i, self._index(ds.baseline_names, var[3:], var)]
        if var.startswith("Lnow_"):
            c = self._index(ds.covariate_names, var[5:], var)
            return self.H[i, np.minimum(k + 1, ds.K), c]
        if var.startswith("L_"):
            return self.H[i, k, self._index(ds.covariate_names, var[2:], var)]
        ft = fixed_time(var)
        if ft is not None:
            j, name = ft
            if j > ds.K:
                raise MissingPredictor(f"{var} refers to a time beyond K={ds.K}")
            return self.H[i, j, self._index(ds.covariate_names, name, var)]
        raise MissingPredictor(f"unknown variable {var!r}")

    @staticmethod
    def _index(names, name, var):
        try:
            return names.index(name)
        except ValueError:
            raise MissingPredictor(f"predictor {var!r} not in dataset") from None


def design_matrix(columns, lookup, m):
    X = np.empty((m, len(columns)))
    cache = {}
    for j, term in enumerate(columns):
        if term == "1":
            X[:, j] = 1.0
            continue
        col = np.ones(m)
        for v in term_vars(term):
            if v not in cache:
                cache[v] = np.asarray(lookup(v), dtype=float)
            col = col * cache[v]
        X[:, j] = col
    return X


def check_temporal(spec, ds):
    """Reject predictors that are not temporally prior to the response."""
    ch = spec.channel
    order = list(ds.partition.ad) + list(ds.partition.ay)
    for term in spec.terms:
        for v in term_vars(term):
            if ch == "A" and not v.startswith("L0_"):
                raise ConfigError(f"treatment model may use baseline covariates only, got {v!r}")
            if v.startswith("Lnow_"):
                if ch != "L":
                    raise ConfigError(f"{v!r} is only valid in covariate density models")
                name = v[5:]
                if name not in order or order.index(name) >= order.index(spec.covariate):
                    raise ConfigError(
                        f"{v!r} is not drawn before {spec.covariate!r} in the same interval")
            if fixed_time(v) is not None and ch != "Y":
                raise ConfigError(f"fixed-time predictor {v!r} is only valid in the outcome model")
            if v in ("aY", "aD"):
                raise ConfigError(f"{v!r} is a structural-law variable; use 'A' in models")


def fit_glm(ds, spec, weights=None):
    """Fit one model on its risk set.

    ``weights`` are optional per-individual frequency weights.  Returns a
    NuisanceFit, or a ChannelFit with one fit per arm if stratified.
    """
    if isinstance(spec, str):
        spec = parse_formula(spec)
    check_temporal(spec, ds)
    exclude = structural_zero_times(ds) if spec.channel == "C" else ()
    rows_i, rows_k, y = risk_rows(ds, spec.response, exclude)
    if len(np.unique(rows_k)) > 1:
        spec = spec.with_time(ds.K)
    ctx = RowContext(ds, rows_i, rows_k)
    X = design_matrix(spec.columns(), ctx.get, len(rows_i))
    w = np.ones(ds.n) if weights is None else np.asarray(weights, dtype=float)
    channel = _fit_rows(spec, X, y, w[rows_i], ds.a_y[rows_i])
    return channel.fits[None] if not spec.stratify_by_arm else channel


def _fit_rows(spec, X, y, w, arms):
    fits = {}
    strata = (0, 1) if spec.stratify_by_arm else (None,)
    for s in strata:
        sel = np.ones(len(y), dtype=bool) if s is None else arms == s
        if not np.any(sel & (w > 0)):
            raise NoRiskSet(f"no at-risk rows for {spec.formula or spec.response}"
                            + ("" if s is None else f" in arm {s}"))
        fitter = fit_logit if spec.link == "logit" else fit_identity
        beta, conv, it, ll, ms = fitter(X[sel], y[sel], w[sel])
        fits[s] = NuisanceFit(spec, tuple(spec.columns()), beta, conv, it, ll,
                              float(w[sel].sum()), ms, s)
    return ChannelFit(spec, fits)


def predict(fit, row):
    """Predict for a single row given as a mapping of variable name to value."""
    def lookup(v):
        if v not in row:
            raise MissingPredictor(f"row lacks predictor {v!r}")
        return np.array([row[v]], dtype=float)

    X = design_matrix(fit.columns, lookup, 1)
    return float(fit.predict_matrix(X)[0])


# ------------------------------------------------------------------- the suite

@dataclass(frozen=True)
class NuisanceSpecSuite:
    specs: tuple

    @classmethod
    def from_formulas(cls, formulas):
        return cls(tuple(parse_formula(f) if isinstance(f, str) else f for f in formulas))

    def get(self, response):
        for s in self.specs:
            if s.response == response:
                return s
        return None


def default_suite(ds):
    """Main-effects models with every available predictor."""
    base = " + ".join(f"L0_{b}" for b in ds.baseline_names)
    lags = " + ".join(f"L_{c}" for c in ds.covariate_names)
    rhs = " + ".join(t for t in ("A", base, lags) if t)
    forms = [f"D ~ {rhs}", f"C ~ {rhs}", f"Y ~ {rhs}"]
    # with a single covariate draw the lagged values are identically zero
    l_rhs = rhs if ds.K > 1 else " + ".join(t for t in ("A", base) if t)
    for c in ds.covariate_names:
        forms.append(f"L_{c} ~ {l_rhs}")
    return NuisanceSpecSuite.from_formulas(forms)


def required_channels(ds):
    req = ["D", "Y"]
    if ds.K > 0:
        req += [f"L_{c}" for c in ds.covariate_names]
    if np.any(ds.C == 1):
        req.append("C")
    return req


@dataclass(frozen=True, eq=False)
class NuisanceSuiteFit:
    channels: dict
    coverage: tuple = ()
    structural_zero_c: tuple = ()
    specs: NuisanceSpecSuite = None
    workspace: object = None

    def __getitem__(self, response):
        return self.channels[response]

    def has(self, response):
        return response in self.channels

    @property
    def converged(self):
        return all(c.converged for c in self.channels.values())

    def summary(self):
        return {"channels": {k: v.summary() for k, v in sorted(self.channels.items())},
                "coverage_missing": list(self.coverage)}


@dataclass(eq=False)
class _Channel:
    spec: ModelSpec
    rows_i: np.ndarray
    rows_k: np.ndarray
    y: np.ndarray
    X: np.ndarray
    X_at: dict
    fit_mask: np.ndarray
    groups: tuple = None


class Workspace:
    """Design matrices of every channel, built once per dataset.

    ``fit`` refits all models under optional per-individual frequency
    weights, which is how bootstrap replicates are evaluated without
    rebuilding designs.  ``evaluate`` returns the per-individual quantities
    the estimators need for a target (a_Y, a_D).
    """

    def __init__(self, ds, specs):
        if not isinstance(specs, NuisanceSpecSuite):
            specs = NuisanceSpecSuite.from_formulas(specs)
        if ds.design != "TwoArm":
            raise ConfigError("nuisance models are fitted on two-arm data")
        self.ds = ds
        self.specs = specs
        self.H = history_array(ds)
        self.zero_c = structural_zero_times(ds)
        self.has_censoring = bool(np.any(ds.C == 1))
        self.channels = {}
        for raw in specs.specs:
            check_temporal(raw, ds)
            if raw.channel == "C" and not self.has_censoring:
                continue
            if raw.channel == "L" and raw.covariate not in ds.covariate_names:
                raise ConfigError(f"model for unknown covariate {raw.covariate!r}")
            self.channels[raw.response] = self._build(raw)
        self.coverage = tuple(r for r in required_channels(ds) if r not in self.channels)
        # outcome predictions are needed for every observed survivor
        D = np.nan_to_num(ds.D, nan=-1.0)
        self.surv_obs = D[:, ds.K] == 0
        self.y_obs = self.surv_obs & (np.nan_to_num(ds.C[:, ds.K], nan=0.0) == 0)
        if "Y" in self.channels:
            idx = np.flatnonzero(self.surv_obs)
            self.y_eval = self._designs(self.channels["Y"].spec, idx, np.full(len(idx), ds.K))
            self.y_eval_rows = idx

    def _designs(self, spec, rows_i, rows_k):
        ctx = RowContext(self.ds, rows_i, rows_k, H=self.H)
        cols = spec.columns()
        X = design_matrix(cols, ctx.get, len(rows_i))
        uses_arm = any("A" in term_vars(t) for t in spec.terms)
        X_at = {}
        for a in (0, 1):
            if uses_arm:
                ctx_a = RowContext(self.ds, rows_i, rows_k, arm=a, H=self.H)
                X_at[a] = design_matrix(cols, ctx_a.get, len(rows_i))
            else:
                X_at[a] = X
        return X, X_at

    def _build(self, raw):
        rows_i, rows_k, y = risk_rows(self.ds, raw.response)
        if raw.channel == "C":
            fit_mask = ~np.isin(rows_k, self.zero_c)
        else:
            fit_mask = np.ones(len(rows_i), dtype=bool)
        # the time index is only added when the fitted rows span several times
        spec = raw.with_time(self.ds.K) if len(np.unique(rows_k[fit_mask])) > 1 else raw
        X, X_at = self._designs(spec, rows_i, rows_k)
        return _Channel(spec, rows_i, rows_k, y, X, X_at, fit_mask,
                        self._groups(X[fit_mask], y[fit_mask], self.ds.a_y[rows_i[fit_mask]]))

    @staticmethod
    def _groups(X, y, arms):
        """Collapse identical (design row, response, arm) rows.

        The likelihoods are sums over rows, so fitting the distinct rows with
        summed weights is exact.  Returns None when collapsing saves little.
        """
        if len(y) == 0:
            return None
        key = np.column_stack([X, y, arms])
        uniq, inverse = np.unique(key, axis=0, return_inverse=True)
        if len(uniq) > 0.5 * len(y):
            return None
        inverse = inverse.ravel()
        return uniq[:, :-2], uniq[:, -2], uniq[:, -1], inverse

    def fit(self, weights=None):
        w = np.ones(self.ds.n) if weights is None else np.asarray(weights, dtype=float)
        fits = {}
        for resp, ch in self.channels.items():
            m = ch.fit_mask
            try:
                if ch.groups is None:
                    cf = _fit_rows(ch.spec, ch.X[m], ch.y[m], w[ch.rows_i[m]],
                                   self.ds.a_y[ch.rows_i[m]])
                else:
                    gX, gy, garm, inv = ch.groups
                    gw = np.bincount(inv, weights=w[ch.rows_i[m]], minlength=len(gy))
                    cf = _fit_rows(ch.spec, gX, gy, gw, garm)
            except SepfxError as exc:
                exc.args = (f"channel {resp}: {exc.args[0] if exc.args else exc}",)
                raise
            if not cf.converged:
                raise NonConvergence(f"channel {resp}: Newton iterations did not converge")
            fits[resp] = cf
        return NuisanceSuiteFit(fits, self.coverage, self.zero_c, self.specs, self)

    def predict(self, suite, response, a, X=None, X_at=None):
        ch = self.channels[response]
        cf = suite[response]
        if cf.spec.stratify_by_arm:
            return cf.fit_for(a).predict_matrix(ch.X if X is None else X)
        return cf.fit_for(a).predict_matrix((ch.X_at if X_at is None else X_at)[a])

    def evaluate(self, suite, a_y, a_d):
        """Per-individual log factors for the target (a_Y, a_D)."""
        ds, n = self.ds, self.ds.n
        arms = sorted({a_y, a_d})
        out = {"logS": {}, "logF": {}, "logPC_all": {}, "logPC_obs": {}, "min_den": {},
               "pi": {}, "m": None}
        for a in arms:
            min_den = np.full(n, 1.0)
            if "D" in self.channels:
                ch = self.channels["D"]
                p = self.predict(suite, "D", a)
                out["logS"][a] = np.bincount(ch.rows_i, weights=np.log1p(-p), minlength=n)
                np.minimum.at(min_den, ch.rows_i, 1 - p)
            logF = {}
            for c in ds.covariate_names:
                resp = f"L_{c}"
                if resp not in self.channels:
                    continue
                ch = self.channels[resp]
                p = self.predict(suite, resp, a)
                f = np.where(ch.y == 1, p, 1 - p)
                logF[c] = np.bincount(ch.rows_i, weights=np.log(f), minlength=n)
                if c in ds.partition.ad:
                    np.minimum.at(min_den, ch.rows_i, f)
            out["logF"][a] = logF
            if "C" in self.channels:
                ch = self.channels["C"]
                p = np.where(ch.fit_mask, self.predict(suite, "C", a), 0.0)
                lp = np.log1p(-p)
                out["logPC_all"][a] = np.bincount(ch.rows_i, weights=lp, minlength=n)
                if ds.grid.terminal_d_first:
                    obs = ch.rows_k < ds.K
                    out["logPC_obs"][a] = np.bincount(ch.rows_i[obs], weights=lp[obs], minlength=n)
                else:
                    out["logPC_obs"][a] = out["logPC_all"][a]
                np.minimum.at(min_den, ch.rows_i, 1 - p)
            else:
                out["logPC_all"][a] = np.zeros(n)
                out["logPC_obs"][a] = np.zeros(n)
            out["min_den"][a] = min_den
        if "Y" in self.channels:
            m = np.full(n, np.nan)
            m[self.y_eval_rows] = self.predict(suite, "Y", a_y, self.y_eval[0], self.y_eval[1])
            out["m"] = m
        return out

    def propensity(self, suite, a, weights=None):
        """P(A=a | L0) per individual; the weighted sample share without a model."""
        ds = self.ds
        if "A" in self.channels:
            p1 = self.predict(suite, "A", 1)
            return (p1 if a == 1 else 1 - p1), True
        w = np.ones(ds.n) if weights is None else weights
        share = float(np.sum(w * (ds.A == a)) / np.sum(w))
        return np.full(ds.n, share), False


def fit_nuisance_suite(ds, specs, weights=None):
    """Fit every model in the suite and report channels lacking a model."""
    return Workspace(ds, specs).fit(weights)
