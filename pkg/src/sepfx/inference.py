"""Nonparametric percentile bootstrap over individuals.

A replicate resamples individuals with replacement.  It is represented by
multinomial counts used as frequency weights, which is equivalent to
refitting on the resampled rows and lets the design matrices be built
once.  Replicate r draws its counts from ``default_rng([seed, r])``, so the
replicate set does not depend on the number of worker threads.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import SepfxError, TooManyFailures
from .estimators import EstimandTarget, _run
from .nuisance import Workspace

log = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.10


@dataclass(frozen=True)
class BootstrapPlan:
    n_boot: int = 500
    seed: int = 0
    ci_level: float = 0.95

    def __post_init__(self):
        if self.n_boot < 2:
            raise ValueError("n_boot must be at least 2")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")


def resolve_threads(threads=None):
    if threads is None:
        threads = int(os.environ.get("SEPFX_THREADS", "1") or 1)
    return max(1, int(threads))


def replicate_counts(n, seed, r):
    return np.random.default_rng([seed, r]).multinomial(n, np.full(n, 1.0 / n)).astype(float)


def percentile_interval(values, level):
    """Equal-tailed percentile interval with linear interpolation."""
    alpha = 1.0 - level
    lo, hi = np.percentile(np.asarray(values, dtype=float), [100 * alpha / 2,
                                                               100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def _point(ws, suite, targets, estimator, fw):
    if isinstance(targets, EstimandTarget):
        return _run(ws, suite, targets, estimator, fw).point
    t1, t0 = targets
    return _run(ws, suite, t1, estimator, fw).point - _run(ws, suite, t0, estimator, fw).point


def bootstrap_many(ds, specs, items, plan, threads=None):
    """Bootstrap several statistics from shared nuisance refits.

    ``items`` is a list of (target, estimator) pairs, where a target is an
    EstimandTarget or a pair of them (a difference).  Returns
    ``(replicates, failures)`` with replicates of shape (n_boot, len(items));
    a failed replicate is a NaN row.
    """
    ws = Workspace(ds, specs)
    n = ds.n

    def one(r):
        fw = replicate_counts(n, plan.seed, r)
        try:
            suite = ws.fit(fw)
            return [_point(ws, suite, t, e, fw) for t, e in items], None
        except SepfxError as exc:
            return [float("nan")] * len(items), f"{type(exc).__name__}: {exc}"

    threads = resolve_threads(threads)
    if threads == 1:
        results = [one(r) for r in range(plan.n_boot)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(plan.n_boot)))
    reps = np.array([v for v, _ in results], dtype=float).reshape(plan.n_boot, len(items))
    failures = [(r, msg) for r, (_, msg) in enumerate(results) if msg is not None]
    return reps, failures


def bootstrap_replicates(ds, specs, targets, estimator, plan, threads=None):
    reps, failures = bootstrap_many(ds, specs, [(targets, estimator)], plan, threads)
    return reps[:, 0], failures


def bootstrap_ci(ds, specs, targets, estimator, plan, threads=None):
    """Percentile bootstrap interval.

    Returns ``(lo, hi, replicates)``; failed replicates are excluded and
    recorded, and more than 10% failures raises TooManyFailures.
    """
    reps, failures = bootstrap_replicates(ds, specs, targets, estimator, plan, threads)
    if len(failures) > MAX_FAILURE_SHARE * plan.n_boot:
        raise TooManyFailures(
            f"{len(failures)} of {plan.n_boot} bootstrap replicates failed; first: {failures[0][1]}")
    for r, msg in failures:
        log.warning("bootstrap replicate %d failed: %s", r, msg)
    ok = reps[np.isfinite(reps)]
    lo, hi = percentile_interval(ok, plan.ci_level)
    return lo, hi, BootstrapResult(reps, failures, plan)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    replicates: np.ndarray
    failures: list
    plan: BootstrapPlan

    @property
    def valid(self):
        return self.replicates[np.isfinite(self.replicates)]

    @property
    def se(self):
        v = self.valid
        return float(np.std(v, ddof=1)) if len(v) > 1 else float("nan")

    def summary(self, lo, hi):
        return {"lo": lo, "hi": hi, "level": self.plan.ci_level, "n_boot": self.plan.n_boot,
                "seed": self.plan.seed, "se": self.se, "n_failed": len(self.failures),
                "failed_replicates": [r for r, _ in self.failures]}
