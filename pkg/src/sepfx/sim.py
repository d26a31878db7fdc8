"""Structural trial simulator with shared exogenous noise.

Every structural node of an individual is driven by one uniform.  Binary
nodes fire when the uniform falls below their success probability, Gaussian
nodes use the inverse normal CDF.  Evaluating the same noise under two
interventions therefore gives the cross-world joint draws needed by the
oracles, and comparing one uniform against ordered probabilities is what
makes the monotone hazard construction work.

Noise is generated in fixed blocks of individuals, block b drawn from
``default_rng([seed, b])``, so any individual's noise depends only on
(seed, index) and results do not depend on how blocks are spread over
workers.
"""

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, ndtri

from .data import FOUR_ARM, TWO_ARM, Partition, TimeGrid, TrialDataset
from .errors import DegenerateOracle, InvalidLaw
from .formula import fixed_time, parse_term, term_vars

BLOCK = 4096
ETA_BOUND = 25.0
VIOLATIONS = ("BreakAyIsolation", "BreakDismissible1", "BreakDismissible3",
              "BreakModifiedTreatment")


@dataclass(frozen=True)
class BaselineSpec:
    name: str
    dist: str = "bernoulli"
    p: float = 0.5
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.dist not in ("bernoulli", "gaussian"):
            raise InvalidLaw(f"baseline {self.name}: unknown distribution {self.dist!r}")
        if self.dist == "bernoulli" and not 0.0 < self.p < 1.0:
            raise InvalidLaw(f"baseline {self.name}: p must lie in (0, 1)")
        if self.dist == "gaussian" and not self.sd > 0:
            raise InvalidLaw(f"baseline {self.name}: sd must be positive")


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    block: str
    coefs: dict

    def __post_init__(self):
        if self.block not in ("AY", "AD"):
            raise InvalidLaw(f"covariate {self.name}: block must be 'AY' or 'AD'")


@dataclass(frozen=True, eq=False)
class StructuralLaw:
    """Parametric generative law.

    Coefficient dictionaries map terms of the formula grammar (with ``aY``
    and ``aD`` in place of ``A``, and ``"1"`` for the intercept) to values on
    the logit scale, or the identity scale for the outcome mean.
    """

    grid: TimeGrid
    baseline: tuple
    covariates: tuple
    hazard: dict
    outcome: dict
    sigma: float = 1.0
    censor: dict = None
    censor_terminal_only: bool = False
    treatment: dict = None
    monotone: bool = False
    violation: str = None
    violation_strength: float = 2.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "baseline", tuple(self.baseline))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        validate_law(self)

    @property
    def K(self):
        return self.grid.K

    @property
    def draw_order(self):
        ad = [c for c in self.covariates if c.block == "AD"]
        ay = [c for c in self.covariates if c.block == "AY"]
        return ad + ay

    @property
    def covariate_names(self):
        return tuple(c.name for c in self.covariates)

    @property
    def baseline_names(self):
        return tuple(b.name for b in self.baseline)

    @property
    def partition(self):
        return Partition(ay=tuple(c.name for c in self.covariates if c.block == "AY"),
                         ad=tuple(c.name for c in self.covariates if c.block == "AD"))

    @property
    def n_nodes(self):
        K = self.K
        return len(self.baseline) + 1 + 2 * (K + 1) + K * len(self.covariates) + 1

    def with_violation(self, violation, strength=None):
        return replace(self, violation=violation,
                       violation_strength=self.violation_strength if strength is None else strength)

    def node_index(self):
        """Column of the noise matrix for each structural node."""
        p0, K = len(self.baseline), self.K
        idx = {("L0", b.name): j for j, b in enumerate(self.baseline)}
        idx[("arm",)] = p0
        col = p0 + 1
        order = [c.name for c in self.draw_order]
        for k in range(K + 1):
            idx[("C", k)] = col
            idx[("D", k)] = col + 1
            col += 2
            if k < K:
                for c in order:
                    idx[("L", k, c)] = col
                    col += 1
        idx[("Y",)] = col
        return idx


# ------------------------------------------------------------------ validation

def _vars_of(coefs):
    out = set()
    for term in coefs:
        if term == "1":
            continue
        parse_term(term)
        vs = term_vars(term)
        if len(set(vs)) != len(vs):
            raise InvalidLaw(f"term {term!r} repeats a variable")
        out.update(vs)
    return out


def validate_law(law):
    """Structural checks plus probability bounds on every reachable history."""
    if law.violation is not None and law.violation not in VIOLATIONS:
        raise InvalidLaw(f"unknown violation {law.violation!r}")
    if law.sigma <= 0:
        raise InvalidLaw("outcome sigma must be positive")
    base = set(law.baseline_names)
    names = [c.name for c in law.covariates]
    if len(set(names)) != len(names) or len(set(law.baseline_names)) != len(law.baseline):
        raise InvalidLaw("duplicate covariate names")
    ay_block = {c.name for c in law.covariates if c.block == "AY"}
    order = [c.name for c in law.draw_order]

    def ref_name(v):
        if v.startswith("L0_"):
            return None
        if v.startswith("Lnow_"):
            return v[5:]
        if v.startswith("L_"):
            return v[2:]
        ft = fixed_time(v)
        return ft[1] if ft else None

    def check(coefs, label, allow_ay=True, allow_ad=True, allow_now=None, allow_fixed=False,
              allow_ay_block=True):
        for v in _vars_of(coefs):
            if v == "A":
                raise InvalidLaw(f"{label}: use 'aY'/'aD' in structural laws, not 'A'")
            if v == "aY" and not allow_ay:
                raise InvalidLaw(f"{label}: dependence on aY is not allowed")
            if v == "aD" and not allow_ad:
                raise InvalidLaw(f"{label}: dependence on aD is not allowed")
            if v.startswith("L0_") and v[3:] not in base:
                raise InvalidLaw(f"{label}: unknown baseline covariate {v!r}")
            name = ref_name(v)
            if name is not None:
                if name not in names:
                    raise InvalidLaw(f"{label}: unknown covariate {v!r}")
                if not allow_ay_block and name in ay_block:
                    raise InvalidLaw(f"{label}: A_Y-block covariate {name!r} would carry aY")
            if v.startswith("Lnow_") and (allow_now is None or name not in allow_now):
                raise InvalidLaw(f"{label}: {v!r} is not drawn earlier in the interval")
            ft = fixed_time(v)
            if ft is not None and (not allow_fixed or ft[0] > law.K or ft[0] < 1):
                raise InvalidLaw(f"{label}: fixed-time term {v!r} not allowed here")

    check(law.hazard, "hazard", allow_ay=False, allow_ay_block=False)
    check(law.outcome, "outcome", allow_ad=False, allow_fixed=True)
    if law.censor is not None:
        check(law.censor, "censor")
    if law.treatment is not None:
        if any(not v.startswith("L0_") for v in _vars_of(law.treatment)):
            raise InvalidLaw("treatment model may use baseline covariates only")
    for c in law.covariates:
        earlier = order[:order.index(c.name)]
        if c.block == "AD":
            check(c.coefs, f"covariate {c.name}", allow_ay=False, allow_now=earlier,
                  allow_ay_block=False)
        else:
            check(c.coefs, f"covariate {c.name}", allow_ad=False, allow_now=earlier)
    _check_bounds(law)
    if law.monotone:
        _check_monotone(law)


def _ranges(law):
    out = {"aY": (0.0, 1.0), "aD": (0.0, 1.0)}
    for b in law.baseline:
        out[f"L0_{b.name}"] = ((0.0, 1.0) if b.dist == "bernoulli"
                               else (b.mean - 5 * b.sd, b.mean + 5 * b.sd))
    return out


def _eta_corners(coefs, k, law, fixed=None):
    """Linear predictor at every corner of the variables' ranges at interval k.

    Terms are multilinear, so extremes over the box of values are attained
    at corners; the enumeration covers every reachable history.
    Returns (corner assignments, eta values).
    """
    rng = _ranges(law)
    fixed = dict(fixed or {})
    vs = sorted(v for v in _vars_of(coefs) if v not in fixed and not v.startswith("T"))
    choices = []
    for v in vs:
        if v in rng:
            choices.append(rng[v])
        else:
            choices.append((0.0, 1.0))
    assigns, etas = [], []
    for combo in itertools.product(*choices):
        env = dict(zip(vs, combo))
        env.update(fixed)
        env["T"] = float(k)
        eta = 0.0
        for term, b in coefs.items():
            if term == "1":
                eta += b
                continue
            val = 1.0
            for v in term_vars(term):
                if v.startswith("T_"):
                    val *= float(int(v[2:]) == k)
                elif v == "T":
                    val *= float(k)
                elif fixed_time(v) is not None and fixed_time(v)[0] > k:
                    val *= 0.0
                elif v.startswith("L_") and k == 0:
                    val *= 0.0
                else:
                    val *= env[v]
            eta += b * val
        assigns.append(env)
        etas.append(eta)
    return assigns, np.array(etas)


def _check_bounds(law):
    K = law.K
    checks = [("hazard", law.hazard, range(K + 1))]
    if law.censor is not None:
        checks.append(("censor", law.censor, [K] if law.censor_terminal_only else range(K + 1)))
    for c in law.covariates:
        checks.append((f"covariate {c.name}", c.coefs, range(K)))
    if law.treatment is not None:
        checks.append(("treatment", law.treatment, [0]))
    for label, coefs, times in checks:
        for k in times:
            _, etas = _eta_corners(coefs, k, law)
            extra = 0.0
            if (label == "hazard" and law.violation in ("BreakAyIsolation",
                                                        "BreakModifiedTreatment")) or (
                    law.violation == "BreakDismissible3" and label.startswith("covariate")):
                extra = abs(law.violation_strength)
            if np.max(np.abs(etas)) + extra > ETA_BOUND:
                raise InvalidLaw(
                    f"{label} at interval {k}: success probability numerically 0 or 1 "
                    f"(|eta| up to {np.max(np.abs(etas)) + extra:.1f})")


def _check_monotone(law):
    rng = _ranges(law)
    base_vars = sorted(v for v in _vars_of(law.hazard) if v.startswith("L0_"))
    if any(law.baseline[law.baseline_names.index(v[3:])].dist == "gaussian"
           for v in base_vars):
        for term in law.hazard:
            vs = term_vars(term) if term != "1" else []
            if any(v.startswith("L0_") for v in vs) and len(vs) > 1:
                raise InvalidLaw("monotone check needs Gaussian baseline terms to be additive")
        base_vars = []
    for k in range(law.K + 1):
        for combo in itertools.product(*[rng[v] for v in base_vars]):
            fixed = dict(zip(base_vars, combo))
            hi = _eta_corners(law.hazard, k, law, {**fixed, "aD": 1.0})[1].max()
            lo = _eta_corners(law.hazard, k, law, {**fixed, "aD": 0.0})[1].min()
            if hi > lo + 1e-12:
                raise InvalidLaw(
                    f"hazard at interval {k} is not monotone: max logit under aD=1 "
                    f"({hi:.3f}) exceeds min under aD=0 ({lo:.3f})")


# ------------------------------------------------------------------------ noise

def exogenous_noise(law, n, seed, threads=1):
    """Uniform noise matrix (n, n_nodes), one uniform per node per individual."""
    m = law.n_nodes
    nblocks = (n + BLOCK - 1) // BLOCK

    def block(b):
        rng = np.random.default_rng([int(seed), b])
        return rng.random((BLOCK, m))

    if threads > 1 and nblocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(block, range(nblocks)))
    else:
        parts = [block(b) for b in range(nblocks)]
    if not parts:
        return np.zeros((0, m))
    return np.concatenate(parts)[:n]


@dataclass(frozen=True, eq=False)
class CounterfactualDraw:
    noise: np.ndarray
    a_y: object
    a_d: object
    L0: np.ndarray
    D: np.ndarray
    L: np.ndarray
    C: np.ndarray
    Y: np.ndarray


class _Env:
    def __init__(self, law, L0, a_y, a_d, H):
        self.law, self.L0, self.a_y, self.a_d, self.H = law, L0, a_y, a_d, H
        self.base = {b.name: j for j, b in enumerate(law.baseline)}
        self.cov = {c.name: j for j, c in enumerate(law.covariates)}

    def eta(self, coefs, k, rows):
        out = np.zeros(len(rows))
        for term, b in coefs.items():
            if term == "1":
                out += b
                continue
            val = np.ones(len(rows))
            for v in term_vars(term):
                val = val * self.value(v, k, rows)
            out += b * val
        return out

    def value(self, v, k, rows):
        if v == "aY":
            return self.a_y[rows]
        if v == "aD":
            return self.a_d[rows]
        if v == "T":
            return np.full(len(rows), float(k))
        if v.startswith("T_"):
            return np.full(len(rows), float(int(v[2:]) == k))
        if v.startswith("L0_"):
            return self.L0[rows, self.base[v[3:]]]
        if v.startswith("Lnow_"):
            return self.H[rows, k + 1, self.cov[v[5:]]]
        if v.startswith("L_"):
            return self.H[rows, k, self.cov[v[2:]]]
        j, name = fixed_time(v)
        if j > k:
            return np.zeros(len(rows))
        return self.H[rows, j, self.cov[name]]


def _baseline(law, U):
    n = U.shape[0]
    L0 = np.empty((n, len(law.baseline)))
    for j, b in enumerate(law.baseline):
        u = U[:, j]
        L0[:, j] = (u < b.p).astype(float) if b.dist == "bernoulli" else b.mean + b.sd * ndtri(u)
    return L0


def evaluate(law, U, a_y, a_d, censor=True, kind=None):
    """Evaluate the structural equations on noise U under given treatments.

    ``a_y``/``a_d`` are scalars (interventions) or per-individual arrays.
    With ``censor=False`` censoring is eliminated (c-bar = 0).  ``kind``
    marks records assigned through the component arms; it only matters for
    the modified-treatment violation.
    """
    U = np.asarray(U)
    n, K = U.shape[0], law.K
    q = len(law.covariates)
    idx = law.node_index()
    a_y = np.broadcast_to(np.asarray(a_y, dtype=float), (n,)).copy()
    a_d = np.broadcast_to(np.asarray(a_d, dtype=float), (n,)).copy()
    if kind is None:
        kind = np.full(n, FOUR_ARM)
    L0 = _baseline(law, U)
    H = np.zeros((n, K + 1, q))
    env = _Env(law, L0, a_y, a_d, H)
    D = np.full((n, K + 1), np.nan)
    C = np.zeros((n, K + 1))
    L = np.full((n, K, q), np.nan)
    Y = np.full(n, np.nan)
    alive = np.ones(n, dtype=bool)
    uncens = np.ones(n, dtype=bool)
    viol, s = law.violation, law.violation_strength
    mt_shift = np.where((kind == FOUR_ARM) & (a_y == a_d), s, 0.0) \
        if viol == "BreakModifiedTreatment" else None
    terminal = law.grid.terminal_d_first
    cov_pos = {c.name: j for j, c in enumerate(law.covariates)}

    def draw_c(k):
        if not censor or law.censor is None or (law.censor_terminal_only and k < K):
            return
        if terminal and k == K:
            rows = np.flatnonzero(alive & uncens & (D[:, k] == 0))
        else:
            rows = np.flatnonzero(alive & uncens)
        p = expit(env.eta(law.censor, k, rows))
        hit = U[rows, idx[("C", k)]] < p
        C[rows[hit], k:] = 1.0
        uncens[rows[hit]] = False
        if not (terminal and k == K):
            D[rows[hit], k:] = np.nan

    def draw_d(k):
        rows = np.flatnonzero(alive & uncens)
        eta = env.eta(law.hazard, k, rows)
        if viol == "BreakAyIsolation":
            eta = eta + s * a_y[rows]
        if mt_shift is not None:
            eta = eta + 0.5 * mt_shift[rows]
        hit = U[rows, idx[("D", k)]] < expit(eta)
        D[rows, k] = hit.astype(float)
        dead = rows[hit]
        D[dead, k:] = 1.0
        alive[dead] = False

    for k in range(K + 1):
        if terminal and k == K:
            draw_d(k)
            draw_c(k)
        else:
            draw_c(k)
            draw_d(k)
        if k < K:
            rows = np.flatnonzero(alive & uncens)
            H[:, k + 1, :] = H[:, k, :]
            for c in law.draw_order:
                eta = env.eta(c.coefs, k, rows)
                if viol == "BreakDismissible3" and (
                        c.block == "AD" or not law.partition.ad):
                    eta = eta + s * a_y[rows]
                val = (U[rows, idx[("L", k, c.name)]] < expit(eta)).astype(float)
                j = cov_pos[c.name]
                H[rows, k + 1, j] = val
                L[rows, k, j] = val
    rows = np.flatnonzero(alive & uncens)
    mean = env.eta(law.outcome, K, rows)
    if viol == "BreakDismissible1":
        mean = mean + s * a_d[rows]
    if mt_shift is not None:
        mean = mean + mt_shift[rows]
    Y[rows] = mean + law.sigma * ndtri(U[rows, idx[("Y",)]])
    return L0, D, L, C, Y


def draw_counterfactual(law, noise, a_y, a_d):
    """Deterministic evaluation under the intervention (a_Y, a_D, c-bar=0)."""
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    if noise.shape[1] != law.n_nodes:
        raise InvalidLaw(f"noise has {noise.shape[1]} columns, law needs {law.n_nodes}")
    L0, D, L, C, Y = evaluate(law, noise, a_y, a_d, censor=False)
    return CounterfactualDraw(noise, a_y, a_d, L0, D, L, C, Y)


def _assign(law, U, L0, design):
    u = U[:, len(law.baseline)]
    n = len(u)
    kind = np.full(n, TWO_ARM, dtype=np.int8)
    if design == "TwoArm":
        if law.treatment is None:
            p = np.full(n, 0.5)
        else:
            env = _Env(law, L0, np.zeros(n), np.zeros(n), np.zeros((n, law.K + 1, 0)))
            p = expit(env.eta(law.treatment, 0, np.arange(n)))
        a = (u < p).astype(float)
        return a, a.copy(), kind
    if design == "FourArm":
        cell = np.minimum((u * 4).astype(int), 3)
        return (cell // 2).astype(float), (cell % 2).astype(float), np.full(n, FOUR_ARM, np.int8)
    if design == "SixArm":
        cell = np.minimum((u * 6).astype(int), 5)
        two = cell < 2
        comp = np.maximum(cell - 2, 0)
        a_y = np.where(two, cell, comp // 2).astype(float)
        a_d = np.where(two, cell, comp % 2).astype(float)
        kind[~two] = FOUR_ARM
        return a_y, a_d, kind
    raise InvalidLaw(f"unknown design {design!r}")


def simulate(law, n, seed, design="TwoArm", violation=None, threads=1):
    """Generate a factual trial dataset from the structural law."""
    if n < 1:
        raise InvalidLaw("n must be at least 1")
    if violation is not None:
        law = law.with_violation(violation)
    U = exogenous_noise(law, n, seed, threads)
    L0 = _baseline(law, U)
    a_y, a_d, kind = _assign(law, U, L0, design)
    L0, D, L, C, Y = evaluate(law, U, a_y, a_d, censor=True, kind=kind)
    return TrialDataset(
        grid=law.grid, L0=L0, a_y=a_y, a_d=a_d, D=D, C=C, L=L, Y=Y,
        ids=np.arange(1, n + 1), kind=kind, design=design,
        baseline_names=law.baseline_names, covariate_names=law.covariate_names,
        partition=law.partition, meta={"seed": int(seed), "violation": law.violation})


# ---------------------------------------------------------------------- oracles

CHUNK_BLOCKS = 16


def _noise_chunks(law, n, seed, threads=1):
    """Yield the noise matrix in aligned chunks; identical to one full draw."""
    step = CHUNK_BLOCKS * BLOCK
    for start in range(0, n, step):
        stop = min(n, start + step)
        b0 = start // BLOCK
        nb = (stop - start + BLOCK - 1) // BLOCK

        def block(b):
            return np.random.default_rng([int(seed), b]).random((BLOCK, law.n_nodes))

        if threads > 1 and nb > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                parts = list(ex.map(block, range(b0, b0 + nb)))
        else:
            parts = [block(b) for b in range(b0, b0 + nb)]
        yield np.concatenate(parts)[:stop - start]


class _Moments:
    """Chan et al. pairwise combination of count, mean and sum of squares."""

    def __init__(self):
        self.n, self.mean, self.m2 = 0, 0.0, 0.0

    def add(self, x):
        nb = len(x)
        if nb == 0:
            return
        mb = float(np.mean(x))
        m2b = float(np.sum((x - mb) ** 2))
        n = self.n + nb
        delta = mb - self.mean
        self.mean += delta * nb / n
        self.m2 += m2b + delta * delta * self.n * nb / n
        self.n = n

    def result(self, what):
        if self.n < 50:
            raise DegenerateOracle(f"only {self.n} {what}")
        return float(self.mean), float(np.sqrt(self.m2 / (self.n - 1) / self.n))


def _monte_carlo(law, n_mc, seed, threads, stats):
    """Accumulate survivor moments for each statistic over noise chunks.

    ``stats`` maps a key to a function of the noise chunk returning the
    values to average.
    """
    acc = {key: _Moments() for key in stats}
    for U in _noise_chunks(law, n_mc, seed, threads):
        for key, fn in stats.items():
            acc[key].add(fn(U))
    return acc


def _survivors_y(law, a_y, a_d):
    def fn(U):
        d = draw_counterfactual(law, U, a_y, a_d)
        return d.Y[d.D[:, law.K] == 0]
    return fn


def oracle_conditional_mean(law, a_y, a_d, n_mc, seed, threads=1):
    """Monte-Carlo E(Y^{aY,aD} | D^{aY,aD}_{K+1} = 0) with its standard error."""
    if n_mc < 1000:
        raise DegenerateOracle("n_mc must be at least 1000")
    acc = _monte_carlo(law, n_mc, seed, threads, {0: _survivors_y(law, a_y, a_d)})
    return acc[0].result("surviving draws")


def oracle_table(law, n_mc, seed, threads=1):
    """All four conditional means from one shared noise matrix."""
    if n_mc < 1000:
        raise DegenerateOracle("n_mc must be at least 1000")
    keys = [(ay, ad) for ay in (0, 1) for ad in (0, 1)]
    acc = _monte_carlo(law, n_mc, seed, threads, {k: _survivors_y(law, *k) for k in keys})
    return {k: acc[k].result("surviving draws") for k in keys}


def _paired(law, w1, w0):
    def fn(U):
        d1 = draw_counterfactual(law, U, *w1)
        d0 = draw_counterfactual(law, U, *w0)
        keep = (d1.D[:, law.K] == 0) & (d0.D[:, law.K] == 0)
        return d1.Y[keep] - d0.Y[keep]
    return fn


def oracle_sace(law, n_mc, seed, threads=1):
    """Monte-Carlo survivor average causal effect using shared noise."""
    acc = _monte_carlo(law, n_mc, seed, threads, {0: _paired(law, (1, 1), (0, 0))})
    return acc[0].result("draws in the always-survivor stratum")


def oracle_cse(law, a_d, n_mc, seed, threads=1):
    """Monte-Carlo conditional separable effect at a_D with a paired standard error.

    Under A_Y partial isolation both worlds share the survivor set, so the
    paired difference is the contrast of the two conditional means.
    """
    acc = _monte_carlo(law, n_mc, seed, threads, {0: _paired(law, (1, a_d), (0, a_d))})
    return acc[0].result("surviving draws")
