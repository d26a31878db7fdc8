"""Shared laws, datasets and generators for the test suite."""

import numpy as np
import pytest

from sepfx.data import Partition, TimeGrid
from sepfx.identification import DiscreteLaw
from sepfx.sim import BaselineSpec, CovariateSpec, StructuralLaw

# correctly specified nuisance models for ``k1_law``
K1_SPECS = ["D ~ L0_x + L_l | A", "L_l ~ A + L0_x", "Y ~ A + L0_x + L_l"]
K1_CENSOR_SPEC = "C ~ A + L0_x + L_l"


def k1_law(ordering="StandardCDL", censor=None, terminal_only=False, **kw):
    """One binary baseline, one A_D-block covariate and a strong L effect on Y."""
    return StructuralLaw(
        TimeGrid(1, ordering), [BaselineSpec("x", p=0.5)],
        [CovariateSpec("l", "AD", {"1": -1.0, "aD": 2.0, "L0_x": 0.5})],
        hazard={"1": -1.5, "aD": -0.5, "L0_x": 0.5, "L_l": 1.5},
        outcome={"1": 1.0, "aY": 0.5, "L0_x": 0.5, "L_l": 3.0}, sigma=1.0,
        censor=censor, censor_terminal_only=terminal_only, **kw)


def censored_k1_law(ordering="TerminalDBeforeC"):
    """k1_law with censoring strongly driven by L (about a third of survivors lose Y)."""
    return k1_law(ordering, censor={"1": -2.2, "aY": 0.3, "L0_x": 0.3, "L_l": 2.2},
                  terminal_only=ordering == "TerminalDBeforeC")


def null_law(K=1):
    return StructuralLaw(
        TimeGrid(K), [BaselineSpec("x", p=0.4)],
        [CovariateSpec("l", "AD", {"1": -0.5, "L0_x": 0.8})],
        hazard={"1": -1.0, "L0_x": 0.4, "L_l": 0.7},
        outcome={"1": 2.0, "L0_x": 1.0, "L_l": -1.5}, sigma=1.0)


def two_cov_law(K=2, ordering="StandardCDL"):
    """Two binary covariates, one per block, with censoring at every interval."""
    return StructuralLaw(
        TimeGrid(K, ordering), [BaselineSpec("x", p=0.45), BaselineSpec("z", p=0.3)],
        [CovariateSpec("m", "AD", {"1": -0.8, "aD": 1.0, "L0_x": 0.4, "L_m": 0.9}),
         CovariateSpec("u", "AY", {"1": 0.2, "aY": -0.7, "Lnow_m": 0.6, "L0_z": 0.3})],
        hazard={"1": -2.0, "aD": -0.6, "L0_x": 0.3, "L_m": 0.8},
        outcome={"1": 0.5, "aY": 1.2, "L0_z": -0.4, "L_m": 1.1, "L_u": -0.9}, sigma=1.5,
        censor={"1": -2.5, "aY": 0.4, "L_u": 0.5})


@pytest.fixture
def law1():
    return k1_law()


def random_discrete_law(rng, K=None, q=None, ordering=None, censoring=None):
    """Random valid discrete law with every table bounded away from 0 and 1."""
    K = int(rng.integers(0, 3)) if K is None else K
    q = int(rng.integers(1, 3)) if q is None else q
    ordering = ordering or ("StandardCDL", "TerminalDBeforeC")[int(rng.integers(2))]
    censoring = bool(rng.integers(2)) if censoring is None else censoring
    m = int(rng.integers(1, 4))
    names = tuple(f"c{j}" for j in range(q))
    l0_prob = rng.dirichlet(np.ones(m))
    treat = rng.uniform(0.2, 0.8, m)
    c_haz, d_haz, l_joint = [], [], []
    for k in range(K + 1):
        shape = (2, m, 2 ** (q * k))
        c_haz.append(rng.uniform(0.02, 0.3, shape) if censoring else np.zeros(shape))
        d_haz.append(rng.uniform(0.05, 0.5, shape))
        if k < K:
            l_joint.append(rng.dirichlet(np.ones(2 ** q), size=shape))
    y_mean = rng.normal(0, 3, (2, m, 2 ** (q * K)))
    split = int(rng.integers(0, q + 1))
    part = Partition(ay=names[:split], ad=names[split:])
    return DiscreteLaw(TimeGrid(K, ordering), np.arange(m, dtype=float).reshape(m, 1),
                       l0_prob, treat, tuple(c_haz), tuple(d_haz), tuple(l_joint), y_mean,
                       names, part, ("b",))


def monotone_law(ad_on_hazard=-0.8):
    """Full isolation: a_D acts on the event hazard only, a_Y on the outcome only."""
    hazard = {"1": -1.2, "L0_x": 0.4, "L_l": 0.5}
    if ad_on_hazard:
        hazard["aD"] = ad_on_hazard
    return StructuralLaw(
        TimeGrid(1), [BaselineSpec("x", p=0.5)],
        [CovariateSpec("l", "AD", {"1": -0.3, "L0_x": 0.6})],
        hazard=hazard, outcome={"1": 1.0, "aY": 1.5, "L0_x": 0.7, "L_l": -1.0, "aY:L0_x": 0.8},
        sigma=1.0, monotone=bool(ad_on_hazard))


# saturated models for ``k1_law`` data: one free parameter per observed cell
K1_SATURATED = ["D ~ L0_x*T + L_l*L0_x - T | A", "L_l ~ L0_x | A", "Y ~ L0_x*L_l | A",
                "A ~ L0_x"]


def k1_saturated(ordering="StandardCDL"):
    """Saturated suite including the censoring model for ``censored_k1_law``."""
    if ordering == "TerminalDBeforeC":
        return K1_SATURATED + ["C ~ L0_x*L_l | A"]
    return K1_SATURATED + ["C ~ L0_x*T + L_l*L0_x - T | A"]
