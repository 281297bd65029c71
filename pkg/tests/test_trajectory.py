import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dosetrial.errors import DegenerateVariance, EmptyOverlap
from dosetrial.trajectory import (PROFILES, classify_profiles, decoupling_contrast,
                                  decoupling_ttest, number_needed_to_harm, profile_contrast,
                                  proportion_test_one_sided)


def one(lk, wt, tie="strict"):
    return classify_profiles({"a": lk}, {"a": wt}, tie=tie).frame["profile"].iloc[0]


def test_profile_examples():
    assert one(-0.1, 0.2) == "DecoupledDependency"
    assert one(0.1, 0.1) == "AlignedEngagement"
    assert one(0.3, -0.2) == "DecoupledSatiation"
    assert one(0.0, 0.0) == "AlignedDisengagement"
    assert one(-0.1, -0.1) == "AlignedDisengagement"
    # strict: zero liking is not decreasing; nonincreasing: it is
    assert one(0.0, 0.2) == "AlignedDisengagement"
    assert one(0.0, 0.2, tie="nonincreasing") == "DecoupledDependency"


def test_profile_frame_and_drops():
    t = classify_profiles({"a": -1.0, "b": 2.0, "c": 1.0}, {"a": 0.5, "b": 1.0, "d": 3.0})
    assert t.dropped == 2
    f = t.frame.set_index("participant_id")
    assert f.loc["a", "decoupling_score"] == 1.5
    with pytest.raises(EmptyOverlap):
        classify_profiles({"a": 1.0}, {"b": 1.0})


slopes = st.dictionaries(st.text("abcdefgh", min_size=1, max_size=3),
                         st.floats(-5, 5, allow_nan=False), min_size=1, max_size=30)


@given(slopes, st.floats(0.01, 100))
def test_counts_sum_and_scale_invariance(lk, c):
    wt = {k: -v / 2 + 0.1 for k, v in lk.items()}
    t = classify_profiles(lk, wt)
    assert t.counts().sum() == len(lk)
    assert list(t.counts().index) == list(PROFILES)
    scaled = classify_profiles({k: c * v for k, v in lk.items()}, {k: c * v for k, v in wt.items()})
    assert list(scaled.frame["profile"]) == list(t.frame["profile"])


def test_nnh_examples():
    assert number_needed_to_harm((25, 100), (20, 100)) == (20.0, 20)
    r = proportion_test_one_sided((30, 100), (30, 100))
    assert r.odds_ratio == 1.0 and r.p == pytest.approx(0.5) and r.nnh is None


def test_proportion_against_hand_computation():
    r = proportion_test_one_sided((60, 200), (40, 200))
    pp = 100 / 400
    z = (0.3 - 0.2) / math.sqrt(pp * (1 - pp) * (2 / 200))
    assert r.z == pytest.approx(z)
    assert r.odds_ratio == pytest.approx((60 * 160) / (40 * 140))
    assert r.nnh == pytest.approx(10.0) and r.nnh_ceiling == 10
    se = math.sqrt(1 / 60 + 1 / 140 + 1 / 40 + 1 / 160)
    assert r.or_ci[0] == pytest.approx(r.odds_ratio * math.exp(-1.959963984540054 * se))


def test_zero_cell():
    r = proportion_test_one_sided((0, 50), (5, 50), direction="less")
    assert r.zero_cell
    assert r.odds_ratio == pytest.approx((0.5 * 45.5) / (5.5 * 50.5))


@given(st.integers(1, 200), st.integers(1, 200), st.data())
def test_swap_arms_flip_direction(ne, nc, data):
    ke = data.draw(st.integers(0, ne))
    kc = data.draw(st.integers(0, nc))
    a = proportion_test_one_sided((ke, ne), (kc, nc), "greater")
    b = proportion_test_one_sided((kc, nc), (ke, ne), "less")
    assert a.p == pytest.approx(b.p, abs=1e-12)
    assert a.odds_ratio == pytest.approx(1 / b.odds_ratio)
    c = proportion_test_one_sided((kc, nc), (ke, ne), "greater")
    if a.z != 0:
        assert a.p + c.p == pytest.approx(1.0, abs=1e-12)
    if a.nnh is not None:
        rd = Fraction(ke, ne) - Fraction(kc, nc)
        assert a.nnh * float(rd) == pytest.approx(1.0, rel=1e-12)


def test_decoupling_examples():
    x = np.arange(10.0)
    r = decoupling_ttest(x, x.copy())
    assert r.cohens_d == 0 and r.p == pytest.approx(0.5)
    rng = np.random.default_rng(0)
    r = decoupling_ttest(rng.normal(0.5, 1, 500), rng.normal(0, 1, 500))
    assert abs(r.cohens_d - 0.5) < 0.1 and r.p < 1e-4
    with pytest.raises(DegenerateVariance):
        decoupling_ttest(np.full(5, 2.0), np.full(5, 1.0))


def test_contrasts_over_profiles():
    lk = {f"p{i}": (-1.0 if i < 6 else 1.0) for i in range(12)}
    wt = {f"p{i}": 1.0 + 0.1 * (i % 3) for i in range(12)}
    t = classify_profiles(lk, wt)
    exposed = [f"p{i}" for i in range(6)]
    r = profile_contrast(t, exposed)
    assert (r.risk_exposed, r.risk_control) == (1.0, 0.0)
    d = decoupling_contrast(t, exposed)
    assert d.mean_exposed == pytest.approx(2.1)
    assert d.t > 0
