from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dosetrial.contrasts import (ReferenceGrid, condition_slopes, emm, lambda_equivalence,
                                 paired_contrast)
from dosetrial.design import ModelSpec
from dosetrial.errors import GridOutsideDesign, NonMonotoneCurve, NoTimeTerm, ScoreOutOfRange
from dosetrial.fixed import fit_fixed
from dosetrial.mixed import fit_lmm
from dosetrial.simulate import (TrialGroundTruth, end_of_study_truth, likeability_truth,
                                linear_predictor, simulate_trial)

LAM = [-1.0, -0.5, 0.0, 0.5, 1.0]


def eos(seed=0, **kw):
    tr = end_of_study_truth("cubic", n_participants=800, seed=seed)
    return tr, simulate_trial(replace(tr, **kw))


def fitted(formula, seed=0, **kw):
    tr, tab = eos(seed, **kw)
    return fit_fixed(ModelSpec.from_formula(formula, tr.outcome), tab), tab


def test_intercept_only_emm():
    m, _ = fitted("value ~ 1")
    out = emm(m, by=())
    assert out["emm"].iloc[0] == pytest.approx(m.coef[0])


def test_two_level_factor_average():
    m, _ = fitted("value ~ domain")
    m = replace(m, coef=np.array([10.0, 4.0]))
    out = emm(m, by=())
    assert out["emm"].iloc[0] == pytest.approx(12.0)
    by = emm(m, by=("domain",)).set_index("domain")["emm"]
    assert by["Political"] == 10.0 and by["Emotional"] == 14.0


def test_emm_near_truth():
    tr, tab = eos(seed=1)
    m = fit_fixed(ModelSpec.from_formula("value ~ poly(lambda,3) + personalised + domain",
                                         tr.outcome), tab)
    out = emm(m)
    for _, r in out.iterrows():
        truth = np.mean([linear_predictor(tr, r["lambda"], p, d, 1.0) for p in (0, 1)
                         for d in (0, 1)])
        assert abs(r["emm"] - truth) < 2.5 * r["se"]
    assert np.allclose(out["ci_upper"] - out["emm"], 1.959963984540054 * out["se"])


def test_saturated_one_factor_is_cell_mean():
    _, tab = eos(seed=2)
    f = tab.model_frame().assign(arm=lambda d: d["lambda"].map({v: f"L{v}" for v in LAM}))
    m = fit_fixed(ModelSpec.from_formula("value ~ arm", "eos_cubic", factors=("arm",)), f)
    got = emm(m, by=("arm",)).set_index("arm")["emm"]
    want = f.groupby("arm")["value"].mean()
    assert np.allclose(got.loc[want.index], want, atol=1e-9)


def test_pure_quadratic_has_zero_contrast():
    m, _ = fitted("value ~ poly(lambda,2)")
    m = replace(m, coef=np.array([5.0, 0.0, 3.0]))
    assert paired_contrast(m).estimate == pytest.approx(0.0, abs=1e-12)


def test_contrast_antisymmetric_and_reference_invariant():
    m, tab = fitted("value ~ poly(lambda,3) + personalised + domain + lambda:domain")
    a = paired_contrast(m, factor="domain", split=(["Emotional"], ["Political"]))
    b = paired_contrast(m, factor="domain", split=(["Political"], ["Emotional"]))
    assert a.estimate == pytest.approx(-b.estimate) and a.se == pytest.approx(b.se)
    other = fit_fixed(ModelSpec.from_formula(
        "value ~ poly(lambda,3) + personalised + domain + lambda:domain", "eos_cubic",
        references={"domain": "Emotional"}), tab)
    c = paired_contrast(other, factor="domain", split=(["Emotional"], ["Political"]))
    assert c.estimate == pytest.approx(a.estimate, abs=1e-8)
    assert c.se == pytest.approx(a.se, rel=1e-8)
    lam = paired_contrast(m)
    lam2 = paired_contrast(other)
    assert lam.estimate == pytest.approx(lam2.estimate, abs=1e-8)


def test_null_domain_contrast_uniform_p():
    ps = []
    for s in range(200):
        m, _ = fitted("value ~ poly(lambda,3) + personalised + domain", seed=s, domain=0.0,
                      n_participants=300)
        ps.append(paired_contrast(m, factor="domain", split=(["Emotional"], ["Political"])).p)
    assert stats.kstest(ps, "uniform").pvalue > 0.01


def test_recovers_likeability_contrast():
    tr = likeability_truth(n_participants=2000, n_times=20, seed=5)
    f = ("value ~ poly(lambda,3) + personalised + domain + time + lambda:personalised"
         " + lambda:domain + lambda:time + personalised:time + domain:time"
         " + (1 + time | participant)")
    m = fit_lmm(ModelSpec.from_formula(f, tr.outcome), simulate_trial(tr))
    c = paired_contrast(m)
    assert c.ci[0] <= 7.40 <= c.ci[1]


def _slope_model(formula):
    tr = TrialGroundTruth(outcome="s", n_participants=100, n_times=4, sd_resid=1.0, seed=0)
    return fit_fixed(ModelSpec.from_formula(formula, "s"), simulate_trial(tr))


def test_shared_slope_without_interactions():
    m = _slope_model("value ~ lambda + domain + time")
    s = condition_slopes(m)
    assert np.allclose(s["slope"], m.coefficient("time"))


def test_hand_set_pooled_slope():
    m = _slope_model("value ~ lambda + time + lambda:time")
    m = replace(m, coef=np.array([50.0, 1.0, 0.19, -0.18]))
    s = condition_slopes(m, ReferenceGrid(levels={"lambda": [0.5, 1.0]}), by=())
    assert s["slope"].iloc[0] == pytest.approx(0.19 - 0.18 * 0.75)


def test_errors():
    m, _ = fitted("value ~ lambda + domain")
    with pytest.raises(NoTimeTerm):
        condition_slopes(m)
    with pytest.raises(GridOutsideDesign):
        emm(m, ReferenceGrid(levels={"domain": ["Martian"]}), by=())
    with pytest.raises(ValueError):
        paired_contrast(m, split=([0.5, 1.0], [1.0]))


def test_binomial_contrast_reports_odds_ratio():
    from dosetrial.simulate import BinaryGroundTruth, simulate_binary_endpoint
    tab = simulate_binary_endpoint(BinaryGroundTruth(n_participants=3000, lam=(0.6,), seed=1))
    m = fit_fixed(ModelSpec.from_formula("value ~ lambda", "binary", family="binomial"), tab)
    c = paired_contrast(m)
    assert c.scale == "log-odds"
    assert c.odds_ratio == pytest.approx(np.exp(c.estimate))
    assert c.estimate == pytest.approx(1.5 * m.coefficient("lambda"))
    assert "prob" in emm(m).columns


CURVE = {-1.0: 1.0, -0.5: 2.0, 0.0: 3.0, 0.5: 5.0, 1.0: 6.0}


def test_lambda_equivalence_examples():
    assert lambda_equivalence([5.0, 5.0, 5.0], CURVE, B=50).lam == pytest.approx(0.5)
    assert lambda_equivalence([4.0], CURVE, B=50).lam == pytest.approx(0.25)
    one = lambda_equivalence([4.6], CURVE, B=200)
    assert one.ci[0] == one.ci[1] == pytest.approx(one.lam)


def test_lambda_equivalence_guards():
    with pytest.raises(NonMonotoneCurve):
        lambda_equivalence([1.0], {0.0: 1.0, 0.5: 3.0, 1.0: 2.0})
    with pytest.warns(ScoreOutOfRange):
        r = lambda_equivalence([10.0], CURVE, B=20)
    assert r.lam == 1.0 and r.clamped


def test_lambda_equivalence_deterministic():
    s = np.random.default_rng(0).normal(4, 0.5, 30)
    a = lambda_equivalence(s, CURVE, seed=3)
    b = lambda_equivalence(s, CURVE, seed=3)
    assert a.ci == b.ci


@settings(max_examples=30)
@given(st.floats(0.1, 10), st.floats(-50, 50))
def test_lambda_equivalence_affine_invariance(a, b):
    s = np.random.default_rng(1).normal(4, 0.4, 25)
    base = lambda_equivalence(s, CURVE, B=200, seed=2)
    moved = lambda_equivalence(a * s + b, {k: a * v + b for k, v in CURVE.items()}, B=200, seed=2)
    assert moved.lam == pytest.approx(base.lam, abs=1e-9)
    assert np.allclose(moved.ci, base.ci, atol=1e-9)
