import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepfx.errors import MismatchedAD, MissingNuisance, NoSurvivors
from sepfx.estimators import (ESTIMATORS, EstimandTarget, complete_cases, estimate,
                              estimate_dr, estimate_effect, estimate_ipw, estimate_or,
                              survivor_mean)
from sepfx.identification import empirical_law, gformula_exact
from sepfx.inference import BootstrapPlan, bootstrap_many
from sepfx.nuisance import fit_nuisance_suite
from sepfx.sim import simulate

from conftest import (K1_CENSOR_SPEC, K1_SATURATED, K1_SPECS, censored_k1_law, k1_law,
                      k1_saturated, null_law)

PAIRS = [(0, 0), (0, 1), (1, 0), (1, 1)]


def observed_survivor_mean(ds, a):
    keep = (ds.A == a) & (ds.D[:, -1] == 0)
    return float(np.mean(ds.Y[keep]))


def test_target_domain_and_label():
    assert "aY=0,aD=1" in EstimandTarget(0, 1).label()
    with pytest.raises(ValueError):
        EstimandTarget(2, 0)


@pytest.mark.parametrize("a", [0, 1])
def test_ipw_weights_are_one_at_matched_components(a):
    ds = simulate(k1_law(), 3000, 1)
    suite = fit_nuisance_suite(ds, K1_SPECS)
    rep = estimate_ipw(ds, suite, EstimandTarget(a, a))
    assert rep.weight_summary["min"] == 1.0 and rep.weight_summary["max"] == 1.0
    assert rep.point == pytest.approx(observed_survivor_mean(ds, a), abs=1e-12)
    assert survivor_mean(ds, suite, a).point == rep.point


@pytest.mark.parametrize("a", [0, 1])
def test_saturated_outcome_model_reproduces_survivor_mean(a):
    ds = simulate(k1_law(), 3000, 2)
    # no propensity model: arms are randomized with equal probability
    suite = fit_nuisance_suite(ds, [f for f in K1_SATURATED if not f.startswith("A ")])
    assert estimate_or(ds, suite, EstimandTarget(a, a)).point == pytest.approx(
        observed_survivor_mean(ds, a), abs=1e-10)


@pytest.mark.parametrize("ordering", ["StandardCDL", "TerminalDBeforeC"])
def test_saturated_estimators_equal_empirical_gformula(ordering):
    ds = simulate(censored_k1_law(ordering), 5000, 3)
    suite = fit_nuisance_suite(ds, k1_saturated(ordering))
    law = empirical_law(ds)
    for t in PAIRS:
        g = gformula_exact(law, *t)
        for e in ESTIMATORS:
            assert abs(estimate(ds, suite, EstimandTarget(*t), e).point - g) < 1e-9


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), t=st.sampled_from(PAIRS), censored=st.booleans())
def test_influence_function_is_centred(seed, t, censored):
    law = censored_k1_law() if censored else k1_law()
    ds = simulate(law, 2000, seed)
    specs = K1_SPECS + ([K1_CENSOR_SPEC] if censored else [])
    rep = estimate_dr(ds, fit_nuisance_suite(ds, specs), EstimandTarget(*t))
    assert abs(rep.if_mean) < 1e-8


def test_estimating_equation_residuals_vanish():
    ds = simulate(censored_k1_law(), 3000, 4)
    suite = fit_nuisance_suite(ds, K1_SPECS + [K1_CENSOR_SPEC])
    for e in ESTIMATORS:
        assert abs(estimate(ds, suite, EstimandTarget(0, 1), e).ee_residual) < 1e-10


def test_frequency_weights_equal_duplicated_rows():
    ds = simulate(censored_k1_law(), 1500, 5)
    counts = np.random.default_rng(1).integers(0, 3, ds.n).astype(float)
    dup = ds.subset(np.repeat(np.arange(ds.n), counts.astype(int)))
    specs = K1_SPECS + [K1_CENSOR_SPEC]
    s1 = fit_nuisance_suite(ds, specs, counts)
    s2 = fit_nuisance_suite(dup, specs)
    for e in ESTIMATORS:
        a = estimate(ds, s1, EstimandTarget(0, 1), e, weights=counts).point
        b = estimate(dup, s2, EstimandTarget(0, 1), e).point
        assert a == pytest.approx(b, abs=1e-9)


def test_null_effect_within_three_se():
    ds = simulate(null_law(), 20_000, 6)
    pair = (EstimandTarget(1, 1), EstimandTarget(0, 1))
    specs = ["D ~ L0_x + L_l | A", "L_l ~ A + L0_x", "Y ~ A + L0_x + L_l"]
    suite = fit_nuisance_suite(ds, specs)
    reps, _ = bootstrap_many(ds, specs, [(pair, e) for e in ESTIMATORS], BootstrapPlan(40, 1))
    for j, e in enumerate(ESTIMATORS):
        point = estimate_effect(ds, suite, pair, e).point
        assert abs(point) < 3 * np.std(reps[:, j], ddof=1)


def test_effect_is_difference_of_components():
    ds = simulate(k1_law(), 3000, 7)
    suite = fit_nuisance_suite(ds, K1_SPECS)
    pair = (EstimandTarget(1, 1), EstimandTarget(0, 1))
    rep = estimate_effect(ds, suite, pair, "DR")
    a, b = (estimate(ds, suite, t, "DR").point for t in pair)
    assert rep.point == pytest.approx(a - b, abs=1e-14)
    with pytest.raises(MismatchedAD):
        estimate_effect(ds, suite, (EstimandTarget(1, 1), EstimandTarget(0, 0)), "DR")


def test_missing_models_and_empty_arms():
    ds = simulate(k1_law(), 1000, 8)
    suite = fit_nuisance_suite(ds, ["Y ~ A + L0_x + L_l"])
    assert estimate_or(ds, suite, EstimandTarget(0, 1)).point is not None
    with pytest.raises(MissingNuisance):
        estimate_ipw(ds, suite, EstimandTarget(0, 1))
    with pytest.raises(MissingNuisance):
        estimate_dr(ds, suite, EstimandTarget(0, 1))
    zero = np.where(ds.A == 1, 0.0, 1.0)
    full = fit_nuisance_suite(ds, K1_SPECS)
    with pytest.raises(NoSurvivors):
        estimate_ipw(ds, full, EstimandTarget(1, 0), weights=zero)


def test_weight_cap_truncates():
    ds = simulate(censored_k1_law(), 3000, 9)
    suite = fit_nuisance_suite(ds, K1_SPECS + [K1_CENSOR_SPEC])
    raw = estimate(ds, suite, EstimandTarget(0, 1), "IPW")
    cut = estimate(ds, suite, EstimandTarget(0, 1), "IPW", cap=90)
    assert cut.weight_summary["max"] < raw.weight_summary["max"]
    assert estimate(ds, suite, EstimandTarget(0, 1), "IPW", cap=100).point == raw.point
    with pytest.raises(ValueError):
        estimate(ds, suite, EstimandTarget(0, 1), "IPW", cap=0)
    with pytest.raises(ValueError):
        estimate(ds, suite, EstimandTarget(0, 1), "XX")


def test_kish_effective_size_bounds():
    ds = simulate(censored_k1_law(), 3000, 10)
    suite = fit_nuisance_suite(ds, K1_SPECS + [K1_CENSOR_SPEC])
    rep = estimate(ds, suite, EstimandTarget(0, 1), "IPW")
    assert 0 < rep.n_effective <= rep.n_contributing


def test_complete_cases_drops_censored_outcomes():
    ds = simulate(censored_k1_law(), 2000, 11)
    cc = complete_cases(ds)
    assert np.all(cc.C[:, -1] == 0) and cc.n == int(np.sum(ds.C[:, -1] == 0))


def test_report_serializes():
    ds = simulate(k1_law(), 1000, 12)
    suite = fit_nuisance_suite(ds, K1_SPECS)
    rep = estimate_dr(ds, suite, EstimandTarget(0, 1))
    blob = json.loads(json.dumps(rep.to_dict()))
    assert blob["target"] == {"a_y": 0, "a_d": 1} and blob["estimator"] == "DR"
    assert "nuisance" in blob and "if_mean" in blob
