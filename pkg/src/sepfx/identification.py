"""Exact evaluation of the identifying functionals on fully discrete laws.

Histories of the binary time-varying covariates are coded as integers:
with q components, the code of (L_1, ..., L_{k+1}) is
``code(L_1..L_k) * 2**q + sum_c L_{k+1,c} * 2**c``.  Tables are arrays
indexed ``[arm, l0 index, history code]``.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Partition, TimeGrid
from .errors import PositivityViolation, SchemaError, TooLarge
from .sim import _Env

POSITIVITY_EPS = 1e-12
MAX_CELLS = 10 ** 6


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    grid: TimeGrid
    l0_support: np.ndarray
    l0_prob: np.ndarray
    treat_prob: np.ndarray
    c_haz: tuple
    d_haz: tuple
    l_joint: tuple
    y_mean: np.ndarray
    covariate_names: tuple = ()
    partition: Partition = None
    baseline_names: tuple = ()

    def __post_init__(self):
        if self.partition is None:
            object.__setattr__(self, "partition", Partition.default(self.covariate_names))
        self.partition.check(self.covariate_names)
        check_tables(self)

    @property
    def K(self):
        return self.grid.K

    @property
    def q(self):
        return len(self.covariate_names)

    @property
    def m(self):
        return len(self.l0_prob)

    def history(self, l0_index, k, code):
        """Tuple of baseline values followed by L_1..L_k for a history code."""
        q = self.q
        vals = [int(v) if float(v).is_integer() else float(v) for v in self.l0_support[l0_index]]
        bits = []
        for _ in range(k):
            v = code % (2 ** q)
            code //= 2 ** q
            bits.insert(0, [(v >> c) & 1 for c in range(q)])
        return tuple(vals) + tuple(b for row in bits for b in row)


def check_tables(law):
    K, q, m = law.K, law.q, law.m
    if abs(float(np.sum(law.l0_prob)) - 1.0) > 1e-12:
        raise SchemaError("baseline probabilities must sum to 1")
    if len(law.c_haz) != K + 1 or len(law.d_haz) != K + 1 or len(law.l_joint) != K:
        raise SchemaError("tables do not match K")
    for k in range(K + 1):
        shape = (2, m, 2 ** (q * k))
        if law.c_haz[k].shape != shape or law.d_haz[k].shape != shape:
            raise SchemaError(f"hazard tables at k={k} must have shape {shape}")
        if k < K:
            lj = law.l_joint[k]
            if lj.shape != shape + (2 ** q,):
                raise SchemaError(f"covariate table at k={k} must have shape {shape + (2 ** q,)}")
            sums = lj.sum(axis=-1)
            ok = np.isnan(sums) | (np.abs(sums - 1.0) <= 1e-12)
            if not ok.all():
                raise SchemaError(f"covariate table rows at k={k} do not sum to 1")
    if law.y_mean.shape != (2, m, 2 ** (q * K)):
        raise SchemaError("outcome table has the wrong shape")
    for name, tabs in (("c_haz", law.c_haz), ("d_haz", law.d_haz)):
        for t in tabs:
            v = t[~np.isnan(t)]
            if np.any((v < 0) | (v > 1)):
                raise SchemaError(f"{name} entries must lie in [0, 1]")


def _extend(arr):
    m, h, b = arr.shape
    return arr.reshape(m, h * b)


def _block_marginal(law, joint):
    """Split a joint covariate table into (A_D-block marginal, A_Y | A_D conditional).

    Both are returned aligned with the joint's last axis.
    """
    q = law.q
    ad_bits = [law.covariate_names.index(n) for n in law.partition.ad]
    vals = np.arange(2 ** q)
    key = np.zeros(2 ** q, dtype=int)
    for j, c in enumerate(ad_bits):
        key |= ((vals >> c) & 1) << j
    marg = np.zeros(joint.shape[:-1] + (2 ** len(ad_bits),))
    for v in range(2 ** q):
        marg[..., key[v]] += joint[..., v]
    ad = marg[..., key]
    with np.errstate(invalid="ignore", divide="ignore"):
        ay_given_ad = joint / ad
    return ad, ay_given_ad


def _observed_masses(law):
    """Per-arm masses at each positivity cell (rows with D_{k+1}=C_{k+1}=0).

    Returns (cells, entry) where cells[k] has shape (2, m, 2^{qk}) and
    entry[k] is the mass entering interval k (D_k = C_k = 0).
    """
    K = law.K
    p1 = law.treat_prob
    arm_mass = np.stack([law.l0_prob * (1 - p1), law.l0_prob * p1])[:, :, None]
    cells, entry = [], []
    cur = arm_mass
    for k in range(K + 1):
        entry.append(cur)
        c = np.nan_to_num(law.c_haz[k], nan=0.0)
        d = np.nan_to_num(law.d_haz[k], nan=0.0)
        cell = cur * (1 - c) * (1 - d)
        cells.append(cell)
        if k < K:
            lj = np.nan_to_num(law.l_joint[k], nan=0.0)
            cur = np.stack([_extend(cell[a][:, :, None] * lj[a]) for a in (0, 1)])
    return cells, entry


def positivity_violations(law):
    """Every cell that breaks positivity, as (k, history, arm, reason) tuples.

    Arm cells: a history observed among event-free uncensored rows at k has
    (near) zero mass in one arm.  Censoring cells: an arm reaching a history
    at k has (near) zero probability of remaining uncensored.
    """
    cells, entry = _observed_masses(law)
    out = []
    for i in range(law.m):
        if law.l0_prob[i] > 0 and not POSITIVITY_EPS < law.treat_prob[i] < 1 - POSITIVITY_EPS:
            arm = 1 if law.treat_prob[i] <= POSITIVITY_EPS else 0
            out.append((0, law.history(i, 0, 0), arm, "treatment"))
    for k in range(law.K + 1):
        total = cells[k][0] + cells[k][1]
        for a in (0, 1):
            bad = (total > 0) & (cells[k][a] < POSITIVITY_EPS)
            for i, h in zip(*np.nonzero(bad)):
                out.append((k, law.history(i, k, h), a, "arm"))
        c = law.c_haz[k]
        for a in (0, 1):
            reach = entry[k][a] > 0
            if law.grid.terminal_d_first and k == law.K:
                reach = reach & (np.nan_to_num(law.d_haz[k][a], nan=1.0) < 1)
            bad = reach & (np.nan_to_num(c[a], nan=1.0) > 1 - POSITIVITY_EPS)
            for i, h in zip(*np.nonzero(bad)):
                out.append((k, law.history(i, k, h), a, "censoring"))
    out.sort(key=lambda t: (t[0], t[1], t[2], t[3]))
    return out


def _raise_positivity(law):
    bad = positivity_violations(law)
    if bad:
        k, hist, arm, reason = bad[0]
        raise PositivityViolation(
            f"positivity fails ({reason}) at k={k}, history={hist}, arm={arm}"
            + (f" and {len(bad) - 1} more cells" if len(bad) > 1 else ""),
            cell=(k, hist, arm))


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _safe_sum(logm, values=None):
    alive = np.isfinite(logm)
    terms = np.exp(logm[alive])
    if values is not None:
        terms = terms * values[alive]
    return math.fsum(terms.tolist())


def gformula_exact(law, a_y, a_d):
    """Evaluate the censored g-formula with the law's covariate partition."""
    _raise_positivity(law)
    K = law.K
    logm = _log(law.l0_prob)[:, None]
    for k in range(K + 1):
        logm = logm + _log(1 - _where_alive(logm, law.d_haz[k][a_d]))
        if k < K:
            ad_y, ay_given_ad_y = _block_marginal(law, law.l_joint[k][a_y])
            ad_d, _ = _block_marginal(law, law.l_joint[k][a_d])
            factor = ay_given_ad_y * ad_d
            step = logm[:, :, None] + _log(_where_alive(logm[:, :, None], factor))
            logm = _extend(step)
    y = law.y_mean[a_y]
    num = _safe_sum(logm, _where_alive(logm, y))
    den = _safe_sum(logm)
    return num / den


def _where_alive(logm, table):
    """Table values where the running mass is positive; NaN elsewhere is harmless."""
    table = np.broadcast_to(table, np.broadcast_shapes(np.shape(logm), np.shape(table)))
    out = np.where(np.isfinite(logm), table, 0.0)
    if np.isnan(out).any():
        raise PositivityViolation("a table entry needed by the identification sum is undefined")
    return out


def weighted_repr_exact(law, a_y, a_d):
    """Evaluate the weighted (inverse-probability) representation exactly.

    Enumerates the observed arm-a_Y law of uncensored histories and applies
    the censoring, event and A_D-block covariate weights path by path.
    """
    _raise_positivity(law)
    with np.errstate(invalid="ignore", divide="ignore"):
        return _weighted(law, a_y, a_d)


def _weighted(law, a_y, a_d):
    K = law.K
    terminal = law.grid.terminal_d_first
    pi = law.treat_prob if a_y == 1 else 1 - law.treat_prob
    p_ay = float(np.sum(law.l0_prob * pi))
    # observed joint mass of (A = a_Y, l0, history, uncensored, event-free)
    log_obs = (_log(law.l0_prob) + _log(pi))[:, None]
    log_w = (np.log(p_ay) - _log(pi))[:, None]
    for k in range(K + 1):
        c = _where_alive(log_obs, law.c_haz[k][a_y])
        d_y = _where_alive(log_obs, law.d_haz[k][a_y])
        d_d = _where_alive(log_obs, law.d_haz[k][a_d])
        if terminal and k == K:
            log_obs = log_obs + _log(1 - d_y) + _log(1 - c)
        else:
            log_obs = log_obs + _log(1 - c) + _log(1 - d_y)
        log_w = log_w - _log(1 - c) + _log(1 - d_d) - _log(1 - d_y)
        if k < K:
            joint_y = law.l_joint[k][a_y]
            ad_y, _ = _block_marginal(law, joint_y)
            ad_d, _ = _block_marginal(law, law.l_joint[k][a_d])
            alive3 = log_obs[:, :, None]
            log_obs = _extend(alive3 + _log(_where_alive(alive3, joint_y)))
            ratio = _log(_where_alive(alive3, ad_d)) - _log(_where_alive(alive3, ad_y))
            log_w = _extend(log_w[:, :, None] + ratio)
    log_w = np.where(np.isfinite(log_obs), log_w, 0.0)
    total = log_obs + log_w - np.log(p_ay)
    y = _where_alive(total, law.y_mean[a_y])
    return _safe_sum(total, y) / _safe_sum(total)


# ------------------------------------------------------------------ law builders

def law_from_structural(slaw):
    """Observed-data conditional tables implied by a structural law (two-arm world)."""
    if any(b.dist != "bernoulli" for b in slaw.baseline):
        raise SchemaError("law_from_structural needs binary baseline covariates")
    K, q, p0 = slaw.K, len(slaw.covariates), len(slaw.baseline)
    if K > 3:
        raise TooLarge(f"K={K} exceeds the exact-enumeration limit of 3")
    m = 2 ** p0
    cells = sum(2 * m * 2 ** (q * k) * (2 ** q if k < K else 1) for k in range(K + 1))
    if cells > MAX_CELLS:
        raise TooLarge(f"{cells} table cells exceed the limit of {MAX_CELLS}")
    support = np.array(list(itertools.product((0.0, 1.0), repeat=p0))).reshape(m, p0)
    probs = np.ones(m)
    for j, b in enumerate(slaw.baseline):
        probs *= np.where(support[:, j] == 1, b.p, 1 - b.p)
    if slaw.treatment is None:
        treat = np.full(m, 0.5)
    else:
        env = _Env(slaw, support, np.zeros(m), np.zeros(m), np.zeros((m, K + 1, 0)))
        treat = expit(env.eta(slaw.treatment, 0, np.arange(m)))
    viol, s = slaw.violation, slaw.violation_strength
    names = slaw.covariate_names
    c_haz, d_haz, l_joint = [], [], []
    for k in range(K + 1):
        nh = 2 ** (q * k)
        ctab = np.zeros((2, m, nh))
        dtab = np.zeros((2, m, nh))
        ltab = np.zeros((2, m, nh, 2 ** q)) if k < K else None
        for a in (0, 1):
            env, rows = _grid_env(slaw, support, a, k, nh)
            if slaw.censor is not None and not (slaw.censor_terminal_only and k < K):
                ctab[a] = expit(env.eta(slaw.censor, k, rows)).reshape(m, nh)
            eta = env.eta(slaw.hazard, k, rows)
            if viol == "BreakAyIsolation":
                eta = eta + s * a
            dtab[a] = expit(eta).reshape(m, nh)
            if k < K:
                for v in range(2 ** q):
                    env.H[:, k + 1, :] = [(v >> c) & 1 for c in range(q)]
                    prob = np.ones(len(rows))
                    for cs in slaw.draw_order:
                        e = env.eta(cs.coefs, k, rows)
                        if viol == "BreakDismissible3" and (cs.block == "AD"
                                                            or not slaw.partition.ad):
                            e = e + s * a
                        p = expit(e)
                        bit = (v >> names.index(cs.name)) & 1
                        prob = prob * (p if bit else 1 - p)
                    ltab[a, :, :, v] = prob.reshape(m, nh)
        c_haz.append(ctab)
        d_haz.append(dtab)
        if k < K:
            l_joint.append(ltab)
    nh = 2 ** (q * K)
    ytab = np.zeros((2, m, nh))
    for a in (0, 1):
        env, rows = _grid_env(slaw, support, a, K, nh)
        mean = env.eta(slaw.outcome, K, rows)
        if viol == "BreakDismissible1":
            mean = mean + s * a
        ytab[a] = mean.reshape(m, nh)
    return DiscreteLaw(slaw.grid, support, probs, treat, tuple(c_haz), tuple(d_haz),
                       tuple(l_joint), ytab, names, slaw.partition, slaw.baseline_names)


def _grid_env(slaw, support, a, k, nh):
    """Environment over all (l0, history through k) combinations, arm a."""
    K, q = slaw.K, len(slaw.covariates)
    m = len(support)
    rows = np.arange(m * nh)
    L0 = np.repeat(support, nh, axis=0)
    H = np.zeros((m * nh, K + 1, q))
    codes = np.tile(np.arange(nh), m)
    for j in range(k, 0, -1):
        v = codes % (2 ** q)
        codes = codes // (2 ** q)
        for c in range(q):
            H[:, j, c] = (v >> c) & 1
    arm = np.full(m * nh, float(a))
    return _Env(slaw, L0, arm, arm, H), rows


def _history_codes(ds, k):
    q = ds.q
    code = np.zeros(ds.n, dtype=np.int64)
    for j in range(k):
        v = np.zeros(ds.n, dtype=np.int64)
        for c in range(q):
            v |= (np.nan_to_num(ds.L[:, j, c], nan=0.0).astype(np.int64) & 1) << c
        code = code * (2 ** q) + v
    return code


def baseline_cells(ds):
    """Unique baseline rows (sorted) and each record's index into them."""
    if ds.n == 0:
        return np.zeros((0, ds.L0.shape[1])), np.zeros(0, dtype=int)
    support, inv = np.unique(ds.L0, axis=0, return_inverse=True)
    return support, inv.reshape(-1)


def empirical_law(ds):
    """Discrete law whose tables are the sample conditional frequencies."""
    if ds.design != "TwoArm":
        raise SchemaError("the empirical law is defined for two-arm data")
    L = ds.L[~np.isnan(ds.L)]
    if np.any((L != 0) & (L != 1)):
        raise SchemaError("time-varying covariates must be binary")
    K, q, n = ds.K, ds.q, ds.n
    support, l0i = baseline_cells(ds)
    m = len(support)
    A = ds.A.astype(int)
    l0_prob = np.bincount(l0i, minlength=m) / n
    treat = np.bincount(l0i, weights=A, minlength=m) / np.bincount(l0i, minlength=m)
    D = np.nan_to_num(ds.D, nan=-1.0)
    C = np.nan_to_num(ds.C, nan=0.0)
    terminal = ds.grid.terminal_d_first
    zeros = np.zeros(n)

    def rate(mask, event, nh, codes):
        idx = (A * m + l0i) * nh + codes
        size = 2 * m * nh
        den = np.bincount(idx[mask], minlength=size).astype(float)
        num = np.bincount(idx[mask], weights=event[mask].astype(float), minlength=size)
        with np.errstate(invalid="ignore", divide="ignore"):
            return (num / den).reshape(2, m, nh)

    c_haz, d_haz, l_joint = [], [], []
    for k in range(K + 1):
        nh = 2 ** (q * k)
        codes = _history_codes(ds, k)
        d_prev = D[:, k - 1] if k > 0 else zeros
        c_prev = C[:, k - 1] if k > 0 else zeros
        if terminal and k == K:
            c_mask = (D[:, k] == 0) & (c_prev == 0)
            d_mask = (d_prev == 0) & (c_prev == 0)
        else:
            c_mask = (d_prev == 0) & (c_prev == 0)
            d_mask = (d_prev == 0) & (C[:, k] == 0)
        c_haz.append(rate(c_mask, C[:, k] == 1, nh, codes))
        d_haz.append(rate(d_mask, D[:, k] == 1, nh, codes))
        if k < K:
            at = (D[:, k] == 0) & (C[:, k] == 0)
            nxt = _history_codes(ds, k + 1) % (2 ** q)
            tab = np.stack([rate(at, nxt == v, nh, codes) for v in range(2 ** q)], axis=-1)
            l_joint.append(tab)
    ymask = (D[:, K] == 0) & (C[:, K] == 0)
    nh = 2 ** (q * K)
    codes = _history_codes(ds, K)
    idx = (A * m + l0i) * nh + codes
    den = np.bincount(idx[ymask], minlength=2 * m * nh).astype(float)
    num = np.bincount(idx[ymask], weights=ds.Y[ymask], minlength=2 * m * nh)
    with np.errstate(invalid="ignore", divide="ignore"):
        y_mean = (num / den).reshape(2, m, nh)
    return DiscreteLaw(ds.grid, support, l0_prob, treat, tuple(c_haz), tuple(d_haz),
                       tuple(l_joint), y_mean, ds.covariate_names, ds.partition,
                       ds.baseline_names)
