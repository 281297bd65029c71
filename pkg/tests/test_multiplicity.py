import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dosetrial.errors import DuplicateTestId, InvalidConfig, InvalidP
from dosetrial.multiplicity import (HypothesisFamily, apply_hierarchy, bh_adjust, bh_reject,
                                    global_adjust, to_frame)


def step_up(p, alpha):
    m = len(p)
    order = np.argsort(p)
    k = 0
    for i in range(m):
        if p[order[i]] <= (i + 1) * alpha / m:
            k = i + 1
    rej = np.zeros(m, dtype=bool)
    rej[order[:k]] = True
    return rej


def test_examples():
    assert bh_adjust([0.03])[0] == pytest.approx(0.03)
    assert bh_reject([0.005, 0.01, 0.03, 0.04]).all()
    assert np.array_equal(bh_adjust([1.0, 1.0, 1.0]), [1.0, 1.0, 1.0])
    assert np.allclose(bh_adjust([0.01, 0.04, 0.03, 0.2]), [0.04, 0.04 * 4 / 3, 0.04 * 4 / 3, 0.2])


def test_invalid():
    with pytest.raises(InvalidP):
        bh_adjust([0.1, 1.2])
    with pytest.raises(InvalidP):
        bh_adjust([np.nan])
    with pytest.raises(InvalidConfig):
        HypothesisFamily("x", "Exploratory", {"a": 0.1})


pvecs = arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 1))


@given(pvecs, st.randoms(use_true_random=False))
def test_permutation_equivariant(p, rnd):
    idx = list(range(len(p)))
    rnd.shuffle(idx)
    assert np.allclose(bh_adjust(p)[idx], bh_adjust(p[idx]))


@given(pvecs)
def test_monotone_bounded_idempotent(p):
    a = bh_adjust(p)
    order = np.argsort(p, kind="mergesort")
    assert np.all(np.diff(a[order]) >= -1e-15)
    assert np.all(a >= p - 1e-15) and np.all(a <= 1)
    # already-adjusted values that are all equal stay put
    flat = np.full(len(p), a.max())
    assert np.allclose(bh_adjust(flat), flat)


@given(pvecs, st.sampled_from([0.01, 0.05, 0.1]))
def test_matches_step_up(p, alpha):
    assert np.array_equal(bh_reject(p, alpha), step_up(p, alpha))


def test_global_null_fdr():
    rng = np.random.default_rng(0)
    reps = [bh_reject(rng.uniform(size=10)).any() for _ in range(1000)]
    # under the global null FDR equals the probability of any rejection
    assert np.mean(reps) <= 0.07


def test_hierarchy_scopes():
    prim = HypothesisFamily("attachment", "Primary", {"a": 0.01, "b": 0.02, "c": 0.04})
    rob = HypothesisFamily("trends", "Robustness", {"r1": 0.02, "r2": 0.03, "r3": 0.5},
                           groups={"r1": "g", "r2": "g"})
    res = {r.test_id: r for r in apply_hierarchy([prim, rob])}
    assert np.allclose([res[t].p_adj for t in "abc"], bh_adjust([0.01, 0.02, 0.04]))
    assert res["a"].scope == "family:attachment" and res["a"].m == 3
    assert np.allclose([res["r1"].p_adj, res["r2"].p_adj], bh_adjust([0.02, 0.03]))
    assert res["r3"].p_adj == 0.5 and res["r3"].m == 1
    assert res["r1"].scope == "group:trends/g"


def test_hierarchy_edge_cases():
    assert apply_hierarchy([HypothesisFamily("e", "Primary", {})]) == []
    with pytest.raises(DuplicateTestId):
        apply_hierarchy([HypothesisFamily("a", "Primary", {"t": 0.1}),
                         HypothesisFamily("b", "Descriptive", {"t": 0.2})])


def test_global_scope_and_frame():
    res = global_adjust({"x": 0.01, "y": 0.04})
    assert [r.p_adj for r in res] == pytest.approx([0.02, 0.04])
    df = to_frame(res)
    assert list(df.columns) == ["test_id", "family", "tier", "p", "p_adj", "scope", "m"]
