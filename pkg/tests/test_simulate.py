import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from dosetrial.design import ModelSpec
from dosetrial.errors import InvalidConfig, Separation
from dosetrial.fixed import fit_fixed
from dosetrial.mixed import fit_crossed_lmm
from dosetrial.simulate import (BinaryGroundTruth, TrialGroundTruth, assign_arms,
                                default_study, linear_predictor, simulate_binary_endpoint,
                                simulate_frontier_panel, simulate_study, simulate_trial)


def base(**kw):
    kw.setdefault("seed", 0)
    return TrialGroundTruth(outcome="y", n_participants=60, n_times=5, intercept=20.0,
                            lam=(2.0, 0.5), domain=1.5, time=0.3, lam_time=0.1, **kw)


def test_zero_noise_is_exact_predictor():
    tr = base(sd_resid=0.0)
    f = simulate_trial(tr).model_frame()
    mu = linear_predictor(tr, f["lambda"], f["personalised"], f["domain"] == "Emotional",
                          f["time"])
    assert np.allclose(f["value"], mu, atol=1e-12)


def test_same_seed_bitwise():
    tr = base(sd_intercept=2.0, sd_slope=0.3, corr=0.2, missing_prob=0.1)
    a = simulate_trial(tr).observations
    b = simulate_trial(tr).observations
    pd.testing.assert_frame_equal(a, b, check_exact=True)
    c = simulate_trial(replace(tr, seed=1)).observations
    assert not a["value"].equals(c["value"])


def test_random_intercept_sd():
    tr = TrialGroundTruth(outcome="y", n_participants=2000, n_times=10, sd_intercept=5.0,
                          sd_resid=1.0, seed=3)
    means = simulate_trial(tr).observations.groupby("participant_id")["value"].mean()
    # participant means carry residual noise of sd 1/sqrt(10)
    assert math.sqrt(means.var() - 0.1) == pytest.approx(5.0, abs=0.3)


def test_binary_base_rate():
    tab = simulate_binary_endpoint(BinaryGroundTruth(n_participants=10000, seed=2))
    assert tab.observations["value"].mean() == pytest.approx(0.5, abs=0.02)
    assert set(tab.observations["value"].unique()) <= {0.0, 1.0}


def test_binary_log_odds_gap_recovered():
    truth = BinaryGroundTruth(cohorts=(("control", 2000, 0.0), ("exposed", 2000, math.log(2.02))),
                              seed=4)
    m = fit_fixed(ModelSpec.from_formula("value ~ cohort", "binary", family="binomial"),
                  simulate_binary_endpoint(truth))
    odds, ci = m.odds_ratios()
    j = m.labels.index("cohort[exposed]")
    assert ci[j, 0] <= 2.02 <= ci[j, 1]


def test_extreme_log_odds_separates():
    truth = BinaryGroundTruth(cohorts=(("a", 300, -20.0), ("b", 300, 20.0)))
    tab = simulate_binary_endpoint(truth)
    with pytest.raises(Separation):
        fit_fixed(ModelSpec.from_formula("value ~ cohort", "binary", family="binomial"), tab)


def test_frontier_panel():
    tab = simulate_frontier_panel(12, 5, sd_model=0.0, sd_prompt=0.0, sd_resid=0.0, seed=1)
    f = tab.model_frame()
    assert np.allclose(f["value"], 3.0 + 0.95 * f["years"])
    assert f["years"].between(0, 2).all()
    one = simulate_frontier_panel(15, 1, seed=2)
    m = fit_crossed_lmm(ModelSpec.from_formula("value ~ years + (1 | participant) + (1 | item)",
                                               "frontier_score"), one)
    assert m.diagnostics["dropped_groupings"] == ["item"]


@settings(max_examples=25)
@given(st.integers(1, 250), st.integers(0, 10_000))
def test_arm_balance(n, seed):
    arms = assign_arms(n, seed)
    cells = arms.groupby(["lambda", "domain", "personalised"]).size()
    counts = cells.reindex(pd.MultiIndex.from_product(
        [[-1.0, -0.5, 0.0, 0.5, 1.0], ["Political", "Emotional"], [False, True]]), fill_value=0)
    assert counts.max() - counts.min() <= 1


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        base(sd_resid=-1.0)
    with pytest.raises(InvalidConfig):
        base(corr=1.5)
    with pytest.raises(InvalidConfig):
        base(lambda_ratios=(0.5, 0.5, 0.5, 0.0, 0.0))
    with pytest.raises(InvalidConfig):
        BinaryGroundTruth(cohorts=())
    with pytest.raises(InvalidConfig):
        simulate_frontier_panel(0, 3)


def test_substreams_stable_when_n_grows():
    tr = base(sd_intercept=2.0)
    small = simulate_trial(tr).observations
    big = simulate_trial(replace(tr, n_participants=120)).observations
    head = big[big["participant_id"].isin(small["participant_id"])].reset_index(drop=True)
    pd.testing.assert_frame_equal(small, head, check_exact=True)


def test_study_is_deterministic_and_complete():
    truth = default_study(n_participants=40, n_sessions=4, n_weeks=2, seed=9)
    a = simulate_study(truth)
    b = simulate_study(truth)
    pd.testing.assert_frame_equal(a.observations, b.observations, check_exact=True)
    outcomes = set(a.observations["outcome"])
    assert {"psychosocial", "preferences"} <= outcomes
    assert len(a.assignments) == 40
