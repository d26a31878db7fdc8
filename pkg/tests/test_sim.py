import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from sepfx.cli import swog_config
from sepfx.data import TWO_ARM, TimeGrid
from sepfx.errors import DegenerateOracle, InvalidLaw
from sepfx.io import grid_from_config, law_from_config
from sepfx.sim import (BaselineSpec, CovariateSpec, StructuralLaw, draw_counterfactual,
                       evaluate, exogenous_noise, oracle_conditional_mean, oracle_sace,
                       oracle_table, simulate)

from conftest import censored_k1_law, k1_law, null_law, two_cov_law

# exact values from the structural enumeration in tests/oracles.py
K1_EXACT = {(0, 0): 1.831372991275844, (0, 1): 3.2833428761492005,
            (1, 0): 2.3313729912758436, (1, 1): 3.7833428761492005}


def swog_law():
    cfg, _ = swog_config()
    return law_from_config(grid_from_config(cfg["grid"]), cfg["law"])


def test_null_law_arm_symmetry():
    ds = simulate(null_law(), 1000, 1)
    s = [np.mean(ds.D[ds.A == a, -1] == 0) for a in (0, 1)]
    n = [np.sum(ds.A == a) for a in (0, 1)]
    se = np.sqrt(sum(p * (1 - p) / m for p, m in zip(s, n)))
    assert abs(s[1] - s[0]) < 4 * se


def test_swog_survival_calibration():
    ds = simulate(swog_law(), 100_000, 7)
    s1 = np.mean(ds.D[ds.A == 1, -1] == 0)
    s0 = np.mean(ds.D[ds.A == 0, -1] == 0)
    se = np.sqrt(0.79 * 0.21 / 50_000)
    assert abs(s1 - 0.79) < 4 * se and abs(s0 - 0.72) < 4 * se
    assert abs((s1 - s0) - 0.07) < 6 * se


def test_simulation_is_deterministic_and_thread_invariant():
    law = two_cov_law()
    a = simulate(law, 9000, 42)
    assert a.equals(simulate(law, 9000, 42))
    assert a.equals(simulate(law, 9000, 42, threads=3))
    assert not a.equals(simulate(law, 9000, 43))


def test_noise_blocks_are_prefix_stable():
    law = k1_law()
    big = exogenous_noise(law, 5000, 3)
    assert np.array_equal(big[:100], exogenous_noise(law, 100, 3))


def test_event_paths_do_not_depend_on_ay():
    for law in (k1_law(), two_cov_law(), swog_law()):
        U = exogenous_noise(law, 10_000, 5)
        for a_d in (0, 1):
            d0 = draw_counterfactual(law, U, 0, a_d)
            d1 = draw_counterfactual(law, U, 1, a_d)
            assert np.array_equal(d0.D, d1.D, equal_nan=True)


def test_joint_intervention_equals_two_arm_world():
    law = two_cov_law()
    U = exogenous_noise(law, 5000, 9)
    for a in (0, 1):
        d = draw_counterfactual(law, U, a, a)
        L0, D, L, C, Y = evaluate(law, U, a, a, censor=False, kind=np.full(5000, TWO_ARM))
        assert np.array_equal(d.D, D, equal_nan=True)
        assert np.array_equal(d.L, L, equal_nan=True)
        assert np.array_equal(d.Y, Y, equal_nan=True)


def test_isolation_violation_yields_discordant_noise():
    law = k1_law().with_violation("BreakAyIsolation")
    U = exogenous_noise(law, 2000, 0)
    d0 = draw_counterfactual(law, U, 0, 1)
    d1 = draw_counterfactual(law, U, 1, 1)
    discordant = np.flatnonzero(~np.all(np.nan_to_num(d0.D, nan=-1) == np.nan_to_num(d1.D, nan=-1),
                                        axis=1))
    assert len(discordant) > 0


def test_draw_rejects_wrong_noise_width():
    law = k1_law()
    with pytest.raises(InvalidLaw):
        draw_counterfactual(law, np.zeros((2, law.n_nodes + 1)), 0, 0)


def test_first_interval_frequencies_match_analytic_values():
    law = k1_law()
    ds = simulate(law, 40_000, 17)
    for a in (0, 1):
        for x in (0, 1):
            cell = (ds.A == a) & (ds.L0[:, 0] == x)
            p = expit(-1.5 - 0.5 * a + 0.5 * x)
            obs = np.mean(ds.D[cell, 0])
            assert abs(obs - p) < 4 * np.sqrt(p * (1 - p) / cell.sum())
            alive = cell & (ds.D[:, 0] == 0)
            pl = expit(-1.0 + 2.0 * a + 0.5 * x)
            assert abs(np.mean(ds.L[alive, 0, 0]) - pl) < 4 * np.sqrt(pl * (1 - pl) / alive.sum())


def test_oracle_matches_exact_enumeration():
    table = oracle_table(k1_law(), 200_000, 13)
    for key, exact in K1_EXACT.items():
        m, se = table[key]
        assert abs(m - exact) < 3 * se


def test_oracle_null_effect():
    law = null_law()
    for a_d in (0, 1):
        m1, s1 = oracle_conditional_mean(law, 1, a_d, 50_000, 2)
        m0, s0 = oracle_conditional_mean(law, 0, a_d, 50_000, 2)
        assert abs(m1 - m0) < 3 * np.hypot(s1, s0)
    m, se = oracle_sace(law, 50_000, 3)
    assert abs(m) < 3 * se + 1e-12


def test_oracle_at_matched_components_is_two_arm_survivor_mean():
    law = censored_k1_law()
    n = 20_000
    U = exogenous_noise(law, n, 4)
    for a in (0, 1):
        _, D, _, _, Y = evaluate(law, U, a, a, censor=False, kind=np.full(n, TWO_ARM))
        direct = np.mean(Y[D[:, -1] == 0])
        assert oracle_conditional_mean(law, a, a, n, 4)[0] == pytest.approx(direct, abs=1e-12)


def test_oracle_chunking_matches_single_pass():
    law = k1_law()
    n = 70_000
    U = exogenous_noise(law, n, 6)
    d = draw_counterfactual(law, U, 0, 1)
    y = d.Y[d.D[:, -1] == 0]
    m, se = oracle_conditional_mean(law, 0, 1, n, 6)
    assert m == pytest.approx(np.mean(y), abs=1e-12)
    assert se == pytest.approx(np.std(y, ddof=1) / np.sqrt(len(y)), rel=1e-9)


def test_degenerate_oracles():
    with pytest.raises(DegenerateOracle):
        oracle_conditional_mean(k1_law(), 0, 0, 999, 0)
    deadly = StructuralLaw(TimeGrid(1), [BaselineSpec("x")], [],
                           hazard={"1": 12.0}, outcome={"1": 0.0})
    with pytest.raises(DegenerateOracle):
        oracle_conditional_mean(deadly, 0, 0, 5000, 0)


@pytest.mark.parametrize("kw", [
    {"hazard": {"1": -1.0, "aY": 0.5}},
    {"hazard": {"1": -1.0, "L0_nope": 0.5}},
    {"hazard": {"1": -30.0}},
    {"outcome": {"1": 0.0, "aD": 1.0}},
    {"sigma": 0.0},
])
def test_invalid_laws(kw):
    args = dict(hazard={"1": -1.0}, outcome={"1": 0.0})
    args.update(kw)
    with pytest.raises(InvalidLaw):
        StructuralLaw(TimeGrid(1), [BaselineSpec("x")], [], **args)


def test_monotone_flag_is_checked():
    with pytest.raises(InvalidLaw):
        StructuralLaw(TimeGrid(1), [BaselineSpec("x")], [], hazard={"1": -1.0, "aD": 0.5},
                      outcome={"1": 0.0}, monotone=True)
    StructuralLaw(TimeGrid(1), [BaselineSpec("x")], [], hazard={"1": -1.0, "aD": -0.5},
                  outcome={"1": 0.0}, monotone=True)


def test_ay_block_covariate_cannot_enter_hazard():
    with pytest.raises(InvalidLaw):
        StructuralLaw(TimeGrid(1), [BaselineSpec("x")], [CovariateSpec("u", "AY", {"1": 0.0})],
                      hazard={"1": -1.0, "L_u": 1.0}, outcome={"1": 0.0})


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), design=st.sampled_from(["TwoArm", "FourArm", "SixArm"]))
def test_designs_tag_records(seed, design):
    ds = simulate(censored_k1_law(), 400, seed, design)
    assert ds.design == design
    if design == "TwoArm":
        assert np.all(ds.a_y == ds.a_d)
    if design == "FourArm":
        assert set(zip(ds.a_y, ds.a_d)) <= {(0, 0), (0, 1), (1, 0), (1, 1)}
    if design == "SixArm":
        two = ds.kind == TWO_ARM
        assert np.all(ds.a_y[two] == ds.a_d[two])
