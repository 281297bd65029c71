"""Exit-criteria checks. Each test records a PASS/FAIL line that is printed in
the terminal summary. These are the slow replicate sweeps: run them alone with
``pytest -m acceptance``."""
import filecmp
import itertools
import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml
from scipy.stats import norm

from dosetrial.config import parse_config
from dosetrial.contrasts import ReferenceGrid, condition_slopes, lambda_equivalence, paired_contrast
from dosetrial.design import ModelSpec
from dosetrial.fixed import fit_fixed
from dosetrial.mixed import compare_fixed_specs, fit_crossed_lmm, fit_lmm
from dosetrial.multiplicity import bh_reject
from dosetrial.pipeline import run_pipeline
from dosetrial.psychometrics import efa_uls, polychoric
from dosetrial.simulate import (BinaryGroundTruth, contrast_of, end_of_study_truth, likeability_truth,
                                recovery_truth, simulate_binary_endpoint, simulate_frontier_panel,
                                simulate_trial, slope_of, true_coefficients)
from dosetrial.trajectory import number_needed_to_harm, proportion_test_one_sided

pytestmark = pytest.mark.acceptance

SEEDS = range(100)
LONG_FORMULA = ("value ~ poly(lambda,3) + personalised + domain + time + lambda:personalised"
                " + lambda:domain + lambda:time + personalised:time + domain:time"
                " + (1 + time | participant)")
DEMO = Path(__file__).resolve().parents[1] / "src" / "dosetrial" / "configs" / "demo.yaml"


def test_reml_matches_anova(report):
    rng = np.random.default_rng(11)
    G, n = 50, 8
    g = np.repeat(np.arange(G), n)
    y = 20 + rng.normal(0, 3, G)[g] + rng.normal(0, 2, G * n)
    df = pd.DataFrame({"participant": g.astype(str), "value": y})
    means = y.reshape(G, n).mean(axis=1)
    msw = ((y.reshape(G, n) - means[:, None]) ** 2).sum() / (G * (n - 1))
    msb = n * ((means - y.mean()) ** 2).sum() / (G - 1)
    s2_u, s2_e = (msb - msw) / n, msw
    assert s2_u > 0

    t0 = time.perf_counter()
    m = fit_lmm(ModelSpec.from_formula("value ~ 1 + (1 | participant)", "y"), df)
    elapsed = time.perf_counter() - t0
    fit_u = float(m.component("participant").cov[0, 0])
    err = max(abs(fit_u - s2_u) / s2_u, abs(m.sigma2 - s2_e) / s2_e)
    ok = err < 1e-6 and elapsed < 1.0
    report(1, ok, f"max relative error {err:.2e}, fit {elapsed:.3f}s")
    assert ok


def test_lmm_recovery(report):
    t0 = time.perf_counter()
    hits = None
    for s in SEEDS:
        tr = recovery_truth(seed=s)
        m = fit_lmm(ModelSpec.from_formula(LONG_FORMULA, tr.outcome), simulate_trial(tr))
        b = true_coefficients(tr, m.labels)
        ci = m.conf_int()
        inside = (ci[:, 0] <= b) & (b <= ci[:, 1])
        hits = inside.astype(int) if hits is None else hits + inside
    elapsed = time.perf_counter() - t0
    worst = int(np.argmin(hits))
    ok = hits.min() >= 93 and elapsed < 300
    report(2, ok, f"coverage min {hits.min()}/100 ({m.labels[worst]}), max {hits.max()}/100, "
                  f"sweep {elapsed:.0f}s")
    assert ok


def test_dose_order_selection(report):
    formula = ("value ~ poly(lambda,3) + personalised + domain + poly(lambda,3):personalised"
               " + poly(lambda,3):domain")
    picks = {}
    for shape in ("cubic", "linear"):
        counts = np.zeros(4, dtype=int)
        for s in SEEDS:
            tr = end_of_study_truth(shape, seed=s)
            base = ModelSpec.from_formula(formula, tr.outcome)
            c = compare_fixed_specs([base.with_poly_order(k) for k in (1, 2, 3)],
                                    simulate_trial(tr))
            counts[int(c.table.loc[c.selected, "poly_order"])] += 1
        picks[shape] = counts
    ok = picks["cubic"][3] >= 90 and picks["linear"][1] >= 85
    report(3, ok, f"cubic picked {picks['cubic'][3]}/100, linear picked {picks['linear'][1]}/100")
    assert ok


@pytest.fixture(scope="module")
def likeability_sweep():
    rows = []
    pos, neg = [0.5, 1.0], [-0.5, -1.0]
    for s in SEEDS:
        tr = likeability_truth(seed=s)
        m = fit_lmm(ModelSpec.from_formula(LONG_FORMULA, tr.outcome), simulate_trial(tr))
        c = paired_contrast(m)
        sp = condition_slopes(m, ReferenceGrid(levels={"lambda": pos}), by=())["slope"].iloc[0]
        sn = condition_slopes(m, ReferenceGrid(levels={"lambda": neg}), by=())["slope"].iloc[0]
        rows.append({"contrast": c.estimate, "true_contrast": contrast_of(tr),
                     "slope_pos": sp, "slope_neg": sn,
                     "true_pos": slope_of(tr, pos), "true_neg": slope_of(tr, neg)})
    return pd.DataFrame(rows)


def test_contrast_recovery(report, likeability_sweep):
    d = likeability_sweep
    assert np.allclose(d["true_contrast"], 7.40)
    mean = d["contrast"].mean()
    ok = abs(mean - 7.40) <= 0.5
    report(4, ok, f"seed-averaged contrast {mean:.3f} (target 7.40 +/- 0.5)")
    assert ok


def test_slope_decomposition(report, likeability_sweep):
    d = likeability_sweep
    assert np.allclose(d["true_pos"], -0.17) and np.allclose(d["true_neg"], 0.19)
    good = ((d["slope_pos"] < 0) & (d["slope_neg"] > 0)
            & ((d["slope_pos"] + 0.17).abs() <= 0.05) & ((d["slope_neg"] - 0.19).abs() <= 0.05))
    ok = good.sum() >= 95
    report(5, ok, f"{int(good.sum())}/100 replicates with correct signs and |error| <= 0.05; "
                  f"means {d['slope_pos'].mean():+.4f} / {d['slope_neg'].mean():+.4f}")
    assert ok


def test_logistic_odds_ratio(report):
    inside = 0
    spec = ModelSpec.from_formula("value ~ cohort", "binary", family="binomial")
    for s in SEEDS:
        truth = BinaryGroundTruth.from_rates({"control": (1500, 0.280), "exposed": (2000, 0.439)},
                                             seed=s)
        m = fit_fixed(spec, simulate_binary_endpoint(truth))
        odds, _ = m.odds_ratios()
        inside += 1.74 <= odds[m.labels.index("cohort[exposed]")] <= 2.33
    ok = inside >= 90
    report(6, ok, f"OR within [1.74, 2.33] in {inside}/100 replicates")
    assert ok


def test_nnh(report):
    nnh, ceil = number_needed_to_harm((25, 100), (20, 100))
    exact = nnh == 20.0 and ceil == 20
    arms = proportion_test_one_sided((515, 2000), (415, 2000))
    ok = exact and round(arms.odds_ratio, 2) == 1.32 and arms.nnh_ceiling == 20
    report(7, ok, f"NNH(0.25 vs 0.20) = {nnh}; seeded arms OR {arms.odds_ratio:.4f}, "
                  f"NNH {arms.nnh:.3f} -> {arms.nnh_ceiling}")
    assert ok


def _brute_force_step_up(p, alpha):
    m = len(p)
    for k in range(m, 0, -1):
        kth = sorted(p)[k - 1]
        if kth <= k * alpha / m:
            return np.array([pi <= kth for pi in p])
    return np.zeros(m, dtype=bool)


def test_bh_fdr(report):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(10_000):
        m = int(rng.integers(1, 21))
        p = rng.uniform(size=m) ** rng.choice([1.0, 3.0])
        if rng.random() < 0.2:
            p = np.round(p, 2)  # ties
        mismatches += not np.array_equal(bh_reject(p), _brute_force_step_up(list(p), 0.05))

    fdp = []
    for _ in range(5000):
        m = 20
        null = rng.random(m) < 0.6
        z = rng.standard_normal(m) + np.where(null, 0.0, 3.0)
        rej = bh_reject(norm.sf(z))
        fdp.append((rej & null).sum() / max(rej.sum(), 1))
    fdr = float(np.mean(fdp))
    ok = mismatches == 0 and fdr <= 0.07
    report(8, ok, f"{mismatches} mismatches over 10000 vectors; empirical FDR {fdr:.4f}")
    assert ok


def test_crossed_trend(report):
    spec = ModelSpec.from_formula("value ~ years + (1 | participant) + (1 | item)",
                                  "frontier_score")
    inside = 0
    for s in SEEDS:
        m = fit_crossed_lmm(spec, simulate_frontier_panel(100, 100, trend_per_year=0.95, seed=s))
        lo, hi = m.conf_int()[m.labels.index("years")]
        inside += lo <= 0.95 <= hi
    ok = inside >= 93
    report(9, ok, f"truth inside 95% CI in {inside}/100 panels")
    assert ok


def test_lambda_equivalence(report):
    curve = {-1.0: 2.0, -0.5: 3.0, 0.0: 4.0, 0.5: 6.0, 1.0: 7.0}
    planted = float(np.interp(0.27, list(curve), list(curve.values())))
    scores = planted + np.random.default_rng(10).normal(0, 0.05, 40)
    res = lambda_equivalence(scores, curve, B=2000, seed=0)
    ok = abs(res.lam - 0.27) <= 0.01 and res.ci[0] <= 0.27 <= res.ci[1]
    report(10, ok, f"lambda {res.lam:.4f}, CI [{res.ci[0]:.4f}, {res.ci[1]:.4f}]")
    assert ok


def _match_loadings(est, true):
    best = np.inf
    for perm in itertools.permutations(range(true.shape[1])):
        E = est[:, perm]
        E = E * np.sign(np.sum(E * true, axis=0))
        best = min(best, float(np.max(np.abs(E - true))))
    return best


def test_polychoric_and_efa(report):
    errs = []
    cov = [[1.0, 0.5], [0.5, 1.0]]
    for s in range(5):
        z = np.random.default_rng(s).multivariate_normal([0, 0], cov, size=10_000)
        x = np.digitize(z[:, 0], [-1.0, -0.2, 0.6, 1.3])
        y = np.digitize(z[:, 1], [-0.8, 0.3, 1.0])
        errs.append(abs(polychoric(x, y).rho - 0.5))
    L = np.array([[.8, 0], [.7, 0], [.6, .1], [0, .75], [0, .65], [.1, .55]])
    phi = np.array([[1, .3], [.3, 1]])
    S = L @ phi @ L.T
    np.fill_diagonal(S, 1.0)
    load_err = _match_loadings(efa_uls(S, 2).loadings, L)
    ok = max(errs) <= 0.03 and load_err <= 0.05
    report(11, ok, f"polychoric max |error| {max(errs):.4f} over 5 seeds; "
                   f"loading max |error| {load_err:.4f}")
    assert ok


def _tree_equal(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if fa != fb:
        return False
    return all(filecmp.cmp(a / f, b / f, shallow=False) for f in fa)


def test_end_to_end_scale(report, tmp_path):
    raw = yaml.safe_load(DEMO.read_text())
    raw["data"].update(n_participants=2000, n_sessions=20)
    cfg = parse_config(raw, DEMO)
    fitted = {m.outcome for m in cfg.models}
    assert len(fitted) >= 5
    times = []
    for run in ("a", "b"):
        t0 = time.perf_counter()
        run_pipeline(cfg, tmp_path / run)
        times.append(time.perf_counter() - t0)
    same = _tree_equal(tmp_path / "a", tmp_path / "b")
    n_plots = len(list((tmp_path / "a" / "plots").glob("*.svg")))
    ok = max(times) < 600 and same and n_plots >= 5
    report(12, ok, f"2000 x 20 pipeline {times[0]:.0f}s / {times[1]:.0f}s, "
                   f"{len(fitted)} outcomes, {n_plots} plots, identical reruns: {same}")
    assert ok
