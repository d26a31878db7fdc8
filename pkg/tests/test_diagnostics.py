import json

import numpy as np
import pytest
from scipy import stats
from hypothesis import given, settings
from hypothesis import strategies as st

from sepfx.data import TWO_ARM, TrialDataset
from sepfx.diagnostics import (check_positivity, falsify_ay_isolation, falsify_modified_treatment,
                               two_proportion_test, welch_test)
from sepfx.errors import InsufficientData, SchemaError
from sepfx.identification import empirical_law, positivity_violations
from sepfx.sim import simulate

from conftest import censored_k1_law, k1_law, two_cov_law


def swap_labels(ds):
    return TrialDataset(ds.grid, ds.L0, 1 - ds.a_y, 1 - ds.a_d, ds.D, ds.C, ds.L, ds.Y,
                        ids=ds.ids, kind=ds.kind, design=ds.design,
                        baseline_names=ds.baseline_names, covariate_names=ds.covariate_names,
                        partition=ds.partition)


def holed(seed=0, n=3000):
    """Arm 1 never keeps L_1 = 1 records."""
    ds = simulate(k1_law(), n, seed)
    drop = (ds.A == 1) & (np.nan_to_num(ds.L[:, 0, 0], nan=0) == 1)
    return ds.subset(~drop)


def test_constructed_hole_is_flagged():
    rep = check_positivity(holed())
    assert not rep.passed
    assert (1, (0, 1), 1, "arm") in rep.flagged and (1, (1, 1), 1, "arm") in rep.flagged
    assert all(f[0] == 1 and f[1][-1] == 1 and f[2] == 1 for f in rep.flagged)
    row = [r for r in rep.rows if r["k"] == 1 and r["history"] == [0, 1]][0]
    assert row["n_A1"] == 0 and row["n_A0"] > 0 and row["flagged"]


@pytest.mark.parametrize("make", [lambda: holed(1),
                                  lambda: simulate(censored_k1_law("StandardCDL"), 4000, 2),
                                  lambda: simulate(censored_k1_law(), 150, 3),
                                  lambda: simulate(two_cov_law(2), 300, 4)])
def test_flags_match_identification_violations(make):
    ds = make()
    assert check_positivity(ds).flagged == positivity_violations(empirical_law(ds))


def test_balanced_simulation_has_no_flags():
    rep = check_positivity(simulate(censored_k1_law("StandardCDL"), 20_000, 5))
    assert rep.passed and rep.flagged == []


def test_empty_dataset_gives_empty_report():
    ds = simulate(k1_law(), 10, 0).subset(np.zeros(10, dtype=bool))
    rep = check_positivity(ds)
    assert rep.rows == [] and rep.flagged == []


def test_identical_arms_give_unit_p_values():
    four = simulate(k1_law(), 4000, 6, "FourArm")
    base = four.subset(four.a_y == 0)
    both = TrialDataset(base.grid, np.vstack([base.L0, base.L0]),
                        np.r_[base.a_y, 1 - base.a_y], np.r_[base.a_d, base.a_d],
                        np.vstack([base.D, base.D]), np.vstack([base.C, base.C]),
                        np.vstack([base.L, base.L]), np.r_[base.Y, base.Y], design="FourArm",
                        baseline_names=base.baseline_names,
                        covariate_names=base.covariate_names)
    rep = falsify_ay_isolation(both)
    assert all(r["p_value"] == 1.0 for r in rep.rows) and not rep.rejected


def test_label_symmetry():
    four = simulate(censored_k1_law(), 3000, 7, "FourArm")
    six = simulate(censored_k1_law(), 6000, 8, "SixArm")
    for fn, ds in ((falsify_ay_isolation, four), (falsify_modified_treatment, six)):
        a, b = fn(ds), fn(swap_labels(ds))
        assert sorted(r["p_value"] for r in a.rows) == pytest.approx(
            sorted(r["p_value"] for r in b.rows), abs=1e-12)
        assert a.p_value == pytest.approx(b.p_value, abs=1e-12)
    two = holed(9)
    flipped = check_positivity(swap_labels(two)).flagged
    assert sorted((k, h, 1 - a, r) for k, h, a, r in check_positivity(two).flagged) == flipped


def test_rows_cover_every_interval_and_stratum():
    ds = simulate(two_cov_law(2), 4000, 10, "FourArm")
    rep = falsify_ay_isolation(ds)
    assert [(r["variable"], r["a_D"]) for r in rep.rows] == [
        (f"D_{k}", a) for k in (1, 2, 3) for a in (0, 1)]
    six = falsify_modified_treatment(simulate(two_cov_law(2), 6000, 10, "SixArm"))
    assert [r["variable"] for r in six.rows] == ["D_1", "D_2", "D_3", "Y"] * 2


def test_small_strata_raise():
    with pytest.raises(InsufficientData):
        falsify_ay_isolation(simulate(k1_law(), 30, 0, "FourArm"))
    with pytest.raises(InsufficientData):
        falsify_modified_treatment(simulate(k1_law(), 40, 0, "SixArm"))


def test_design_checks():
    two = simulate(k1_law(), 100, 0)
    with pytest.raises(SchemaError):
        falsify_ay_isolation(two)
    with pytest.raises(SchemaError):
        falsify_modified_treatment(simulate(k1_law(), 100, 0, "FourArm"))
    with pytest.raises(SchemaError):
        check_positivity(simulate(k1_law(), 100, 0, "FourArm"))


def test_six_arm_tests_pass_without_perturbation_and_reject_with_it():
    ok = falsify_modified_treatment(simulate(k1_law(), 5000, 11, "SixArm"))
    bad = falsify_modified_treatment(simulate(k1_law(), 5000, 11, "SixArm",
                                              violation="BreakModifiedTreatment"))
    assert not ok.rejected and bad.rejected and bad.p_value < 1e-3


def test_six_arm_two_arm_records_are_plain_arms():
    ds = simulate(k1_law(), 600, 12, "SixArm")
    assert set(np.unique(ds.kind)) == {0, 1}
    assert np.all(ds.a_y[ds.kind == TWO_ARM] == ds.a_d[ds.kind == TWO_ARM])


def test_reports_render_and_serialize():
    rep = falsify_ay_isolation(simulate(k1_law(), 2000, 13, "FourArm"), alpha=0.01)
    text = rep.render()
    assert "overall p-value (bonferroni)" in text and "D_2" in text
    blob = json.loads(json.dumps(rep.to_dict()))
    assert blob["alpha"] == 0.01 and len(blob["rows"]) == 4
    holes = check_positivity(holed())
    assert "flagged cells" in holes.render()
    json.dumps(holes.to_dict())


def test_correction_choices():
    ds = simulate(k1_law(), 2000, 14, "FourArm")
    bonf = falsify_ay_isolation(ds)
    raw = falsify_ay_isolation(ds, correction="none")
    assert bonf.p_value == pytest.approx(min(1.0, 4 * raw.p_value))
    with pytest.raises(ValueError):
        falsify_ay_isolation(ds, correction="holm")
    with pytest.raises(ValueError):
        falsify_ay_isolation(ds, alpha=1.5)


@settings(max_examples=50, deadline=None)
@given(x1=st.integers(0, 40), n1=st.integers(1, 40), x0=st.integers(0, 40), n0=st.integers(1, 40))
def test_p_values_are_probabilities(x1, n1, x0, n0):
    x1, x0 = min(x1, n1), min(x0, n0)
    z, p = two_proportion_test(x1, n1, x0, n0)
    assert 0.0 <= p <= 1.0 and z >= 0.0
    assert two_proportion_test(x0, n0, x1, n1) == (z, p)


def test_welch_matches_reference_value():
    # hand computation: means 2.5 and 6, squared standard errors 5/12 and 2
    a, b = np.array([1.0, 2.0, 3.0, 4.0]), np.array([2.0, 4.0, 6.0, 8.0, 10.0])
    t, p = welch_test(a, b)
    assert abs(t) == pytest.approx(3.5 / np.sqrt(5 / 12 + 2), abs=1e-12)
    ref = stats.ttest_ind(a, b, equal_var=False)
    assert p == pytest.approx(ref.pvalue, abs=1e-12)
