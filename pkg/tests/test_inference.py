import numpy as np
import pytest

from sepfx.data import TimeGrid, TrialDataset
from sepfx.errors import TooManyFailures
from sepfx.estimators import EstimandTarget
from sepfx.inference import (BootstrapPlan, bootstrap_ci, bootstrap_many, percentile_interval,
                             replicate_counts, resolve_threads)
from sepfx.sim import simulate

from conftest import K1_CENSOR_SPEC, K1_SPECS, censored_k1_law, k1_law

T01 = EstimandTarget(0, 1)


def test_plan_validation():
    with pytest.raises(ValueError):
        BootstrapPlan(n_boot=1)
    with pytest.raises(ValueError):
        BootstrapPlan(ci_level=1.0)


def test_replicate_counts_sum_to_n():
    c = replicate_counts(50, 3, 7)
    assert c.sum() == 50 and np.array_equal(c, replicate_counts(50, 3, 7))
    assert not np.array_equal(c, replicate_counts(50, 3, 8))


def test_percentile_interval_interpolates():
    vals = np.arange(1, 11, dtype=float)
    lo, hi = percentile_interval(vals, 0.9)
    assert lo == pytest.approx(1.45) and hi == pytest.approx(9.55)


def test_constant_estimator_gives_degenerate_interval():
    ds = simulate(k1_law(), 400, 1)
    Y = np.where(np.isnan(ds.Y), np.nan, 2.5)
    ds = TrialDataset(ds.grid, ds.L0, ds.a_y, ds.a_d, ds.D, ds.C, ds.L, Y,
                      baseline_names=ds.baseline_names, covariate_names=ds.covariate_names)
    lo, hi, res = bootstrap_ci(ds, K1_SPECS, EstimandTarget(1, 1), "IPW", BootstrapPlan(20, 0))
    assert lo == pytest.approx(2.5, abs=1e-12) and hi == pytest.approx(2.5, abs=1e-12)
    assert res.se == pytest.approx(0.0, abs=1e-12)


def test_same_seed_same_interval_and_thread_invariance():
    ds = simulate(censored_k1_law(), 1500, 2)
    specs = K1_SPECS + [K1_CENSOR_SPEC]
    plan = BootstrapPlan(30, 9)
    a = bootstrap_ci(ds, specs, T01, "DR", plan)
    b = bootstrap_ci(ds, specs, T01, "DR", plan)
    c = bootstrap_ci(ds, specs, T01, "DR", plan, threads=3)
    assert a[:2] == b[:2] == c[:2]
    assert np.array_equal(a[2].replicates, c[2].replicates)
    assert a[:2] != bootstrap_ci(ds, specs, T01, "DR", BootstrapPlan(30, 10))[:2]


def test_many_items_share_replicates():
    ds = simulate(k1_law(), 1000, 3)
    plan = BootstrapPlan(10, 4)
    pair = (EstimandTarget(1, 1), T01)
    reps, failures = bootstrap_many(ds, K1_SPECS, [(T01, "OR"), (EstimandTarget(1, 1), "OR"),
                                                   (pair, "OR")], plan)
    assert failures == [] and reps.shape == (10, 3)
    assert np.allclose(reps[:, 2], reps[:, 1] - reps[:, 0], atol=1e-12)


def test_too_many_failures():
    n = 30
    D = np.ones((n, 1))
    D[0] = 0.0  # a single survivor, in arm 1
    a = (np.arange(n) % 2 == 0).astype(int)
    Y = np.full(n, np.nan)
    Y[0] = 1.0
    ds = TrialDataset(TimeGrid(0), np.zeros((n, 0)), a, a, D, np.zeros((n, 1)),
                      np.zeros((n, 0, 0)), Y)
    with pytest.raises(TooManyFailures):
        bootstrap_ci(ds, ["D ~ A", "Y ~ 1"], EstimandTarget(1, 1), "IPW", BootstrapPlan(40, 0))


def test_interval_narrows_with_sample_size():
    widths = {2000: [], 20000: []}
    for seed in range(10):
        for n in widths:
            ds = simulate(k1_law(), n, 100 + seed)
            lo, hi, _ = bootstrap_ci(ds, K1_SPECS, T01, "DR", BootstrapPlan(40, seed))
            widths[n].append(hi - lo)
    assert np.median(widths[20000]) < np.median(widths[2000])


def test_thread_resolution(monkeypatch):
    monkeypatch.setenv("SEPFX_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.delenv("SEPFX_THREADS")
    assert resolve_threads(None) == 1
