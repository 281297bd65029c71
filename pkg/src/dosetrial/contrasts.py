"""Estimated marginal means, paired contrasts, per-condition time slopes and
inversion of a steering curve (lambda equivalence)."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit

from .data import LAMBDA_LEVELS
from .design import DOSE_VAR, TIME_VAR
from .errors import GridOutsideDesign, NonMonotoneCurve, NoTimeTerm, ScoreOutOfRange

Z95 = float(stats.norm.ppf(0.975))


@dataclass
class ReferenceGrid:
    """Settings to average model predictions over.

    ``levels`` overrides the values used for a variable (e.g. restrict lambda
    to {0.5, 1}); ``weights`` maps a variable to per-level weights, equal
    otherwise. Variables not listed take all fitted levels (factors), the five
    design levels (lambda), all observed time points, or the fitted mean
    (numeric covariates).
    """

    levels: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    time: list | None = None

    def __post_init__(self):
        for name, w in self.weights.items():
            w = np.asarray(list(w.values()) if isinstance(w, dict) else w, dtype=float)
            if (w < 0).any() or w.sum() <= 0:
                raise ValueError(f"weights for {name} must be non-negative with positive sum")

    @classmethod
    def observed(cls, frame: pd.DataFrame, names, **kw) -> "ReferenceGrid":
        """Grid weighting each listed variable by its observed frequencies."""
        weights = {}
        for name in names:
            counts = frame[name].value_counts(normalize=True, sort=False)
            weights[name] = {k: float(v) for k, v in counts.items()}
        return cls(weights=weights, **kw)

    def at_time(self, t) -> "ReferenceGrid":
        return ReferenceGrid(levels=dict(self.levels), weights=dict(self.weights), time=[t])


@dataclass
class ContrastResult:
    name: str
    estimate: float
    se: float
    z: float
    p: float
    ci: tuple
    family: str | None = None
    p_adj: float | None = None
    scope: str | None = None
    scale: str = "response"
    odds_ratio: float | None = None
    or_ci: tuple | None = None

    def to_dict(self):
        d = {"name": self.name, "estimate": self.estimate, "se": self.se, "z": self.z,
             "p": self.p, "ci_lower": self.ci[0], "ci_upper": self.ci[1],
             "family": self.family, "p_adj": self.p_adj, "scope": self.scope,
             "scale": self.scale}
        if self.odds_ratio is not None:
            d.update(odds_ratio=self.odds_ratio, or_lower=self.or_ci[0], or_upper=self.or_ci[1])
        return d


def _wald(name, L, model, family=None) -> ContrastResult:
    est = float(L @ model.coef)
    se = float(math.sqrt(max(L @ model.cov @ L, 0.0)))
    z = est / se if se > 0 else (0.0 if est == 0 else math.copysign(math.inf, est))
    p = float(2 * stats.norm.sf(abs(z)))
    ci = (est - Z95 * se, est + Z95 * se)
    res = ContrastResult(name=name, estimate=est, se=se, z=z, p=p, ci=ci, family=family)
    if getattr(model, "family", "gaussian") == "binomial":
        res.scale = "log-odds"
        res.odds_ratio = math.exp(est)
        res.or_ci = (math.exp(ci[0]), math.exp(ci[1]))
    return res


# ---------------------------------------------------------------------------
# grid expansion
# ---------------------------------------------------------------------------

def _variable_levels(model, grid: ReferenceGrid):
    info = model.design_info
    out = {}
    for name in sorted(info.variables()):
        if name in grid.levels:
            vals = list(grid.levels[name])
            if name in info.factor_levels:
                known = info.factor_levels[name]
                for v in vals:
                    if v not in known:
                        raise GridOutsideDesign(f"{name}={v!r} was not observed when fitting")
        elif name == TIME_VAR:
            vals = list(grid.time) if grid.time is not None else list(info.time_points)
        elif name in info.factor_levels:
            vals = list(info.factor_levels[name])
        elif name == DOSE_VAR:
            vals = list(LAMBDA_LEVELS)
        elif name in info.numeric_means:
            vals = [info.numeric_means[name]]
        else:
            raise GridOutsideDesign(f"no grid values for {name!r}")
        w = grid.weights.get(name)
        if w is None:
            wv = np.full(len(vals), 1.0 / len(vals))
        elif isinstance(w, dict):
            wv = np.array([float(w.get(v, 0.0)) for v in vals])
            if wv.sum() <= 0:
                raise GridOutsideDesign(f"weights for {name} miss every grid level")
            wv = wv / wv.sum()
        else:
            wv = np.asarray(w, dtype=float)
            wv = wv / wv.sum()
        out[name] = (vals, wv)
    return out


def _grid_frame(levels: dict):
    names = list(levels)
    combos = list(product(*[range(len(levels[n][0])) for n in names]))
    data = {n: [levels[n][0][c[i]] for c in combos] for i, n in enumerate(names)}
    w = np.ones(len(combos))
    for i, n in enumerate(names):
        w *= np.array([levels[n][1][c[i]] for c in combos])
    frame = pd.DataFrame(data) if names else pd.DataFrame(index=range(1))
    return frame, w


def _rows(model, frame):
    return model.design_info.transform(frame)


def _functionals(model, grid, by, shift_time=False):
    """One averaged design row per combination of ``by`` variables."""
    levels = _variable_levels(model, grid)
    by = list(by)
    for b in by:
        if b not in levels:
            raise GridOutsideDesign(f"{b!r} is not a model variable")
    frame, w = _grid_frame(levels)
    X = _rows(model, frame)
    if shift_time:
        later = frame.copy()
        later[TIME_VAR] = later[TIME_VAR] + 1
        X = _rows(model, later) - X
    if not by:
        return pd.DataFrame(index=[0]), (w[:, None] * X).sum(0, keepdims=True) / w.sum()
    keys = frame[by].map(_hashable)
    groups = []
    for combo in product(*[levels[b][0] for b in by]):
        mask = np.ones(len(frame), dtype=bool)
        for b, v in zip(by, combo):
            mask &= keys[b].to_numpy() == _hashable(v)
        ww = w[mask]
        groups.append((combo, (ww[:, None] * X[mask]).sum(0) / ww.sum()))
    labels = pd.DataFrame([g[0] for g in groups], columns=by)
    return labels, np.vstack([g[1] for g in groups])


def _hashable(v):
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.floating, float, np.integer, int)):
        return float(v)
    return v


def emm(model, grid: ReferenceGrid | None = None, by=(DOSE_VAR,)) -> pd.DataFrame:
    """Marginal means per combination of ``by`` with delta-method SEs.

    Binomial models are averaged on the log-odds scale; the response-scale
    probability of that mean is added as ``prob``.
    """
    grid = grid or ReferenceGrid()
    labels, L = _functionals(model, grid, by)
    est = L @ model.coef
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", L, model.cov, L), 0, None))
    out = labels.copy()
    out["emm"] = est
    out["se"] = se
    out["ci_lower"] = est - Z95 * se
    out["ci_upper"] = est + Z95 * se
    if getattr(model, "family", "gaussian") == "binomial":
        out["prob"] = expit(est)
        out["prob_lower"] = expit(out["ci_lower"])
        out["prob_upper"] = expit(out["ci_upper"])
    return out


def paired_contrast(model, grid: ReferenceGrid | None = None, factor: str = DOSE_VAR,
                    split=((0.5, 1.0), (-0.5, -1.0)), name: str | None = None,
                    family: str | None = None) -> ContrastResult:
    """Mean EMM over ``split[0]`` minus mean EMM over ``split[1]``.

    Levels within each side are weighted by the grid weights for ``factor``
    (equal by default).
    """
    a, b = (list(s) for s in split)
    if not a or not b:
        raise ValueError("both sides of the split need at least one level")
    if {_hashable(v) for v in a} & {_hashable(v) for v in b}:
        raise ValueError("split sides overlap")
    grid = grid or ReferenceGrid()
    side_rows = []
    for side in (a, b):
        g = ReferenceGrid(levels={**grid.levels, factor: side},
                          weights=_restrict_weights(grid.weights, factor, side), time=grid.time)
        _, L = _functionals(model, g, ())
        side_rows.append(L[0])
    L = side_rows[0] - side_rows[1]
    name = name or f"{factor}[{'/'.join(map(str, a))}] - {factor}[{'/'.join(map(str, b))}]"
    return _wald(name, L, model, family)


def _restrict_weights(weights, factor, side):
    out = dict(weights)
    w = weights.get(factor)
    if isinstance(w, dict):
        out[factor] = {k: v for k, v in w.items() if any(_hashable(k) == _hashable(s) for s in side)}
    elif w is not None:
        out.pop(factor)
    return out


def condition_slopes(model, grid: ReferenceGrid | None = None, by=(DOSE_VAR,)) -> pd.DataFrame:
    """Time slope per condition: time coefficient plus the interaction terms
    that apply, averaged over the remaining grid variables."""
    if TIME_VAR not in model.design_info.variables():
        raise NoTimeTerm("model has no time term")
    grid = grid or ReferenceGrid()
    # slopes are linear in time, so evaluate one unit step from t = 0
    g = ReferenceGrid(levels=grid.levels, weights={k: v for k, v in grid.weights.items()
                                                   if k != TIME_VAR}, time=[0])
    labels, L = _functionals(model, g, by, shift_time=True)
    rows = []
    for i in range(len(L)):
        res = _wald("slope", L[i], model)
        rows.append({"slope": res.estimate, "se": res.se, "z": res.z, "p": res.p,
                     "ci_lower": res.ci[0], "ci_upper": res.ci[1]})
    out = pd.concat([labels.reset_index(drop=True), pd.DataFrame(rows)], axis=1)
    return out


def slope_contrast(model, grid: ReferenceGrid | None = None, by=(DOSE_VAR,), name="slope"):
    """Single pooled slope as a :class:`ContrastResult`."""
    grid = grid or ReferenceGrid()
    g = ReferenceGrid(levels=grid.levels, weights=grid.weights, time=[0])
    _, L = _functionals(model, g, (), shift_time=True)
    return _wald(name, L[0], model)


# ---------------------------------------------------------------------------
# lambda equivalence
# ---------------------------------------------------------------------------

@dataclass
class LambdaEquivalence:
    lam: float
    ci: tuple
    median_score: float
    clamped: bool
    boot: np.ndarray = field(repr=False)

    def to_dict(self):
        return {"lambda": self.lam, "ci_lower": self.ci[0], "ci_upper": self.ci[1],
                "median_score": self.median_score, "clamped": self.clamped,
                "bootstrap_draws": int(len(self.boot))}


def _inverse_curve(curve):
    if isinstance(curve, pd.DataFrame):
        lam = curve.iloc[:, 0].to_numpy(dtype=float)
        score = curve.iloc[:, 1].to_numpy(dtype=float)
    elif isinstance(curve, dict):
        lam = np.array(list(curve.keys()), dtype=float)
        score = np.array(list(curve.values()), dtype=float)
    else:
        arr = np.asarray(curve, dtype=float)
        lam, score = arr[:, 0], arr[:, 1]
    order = np.argsort(lam)
    lam, score = lam[order], score[order]
    if len(lam) < 2:
        raise NonMonotoneCurve("steering curve needs at least two points")
    d = np.diff(score)
    if np.all(d > 0):
        return lam, score
    if np.all(d < 0):
        return lam[::-1], score[::-1]
    raise NonMonotoneCurve("steering curve is not strictly monotone in lambda")


def _invert(values, lam, score):
    values = np.asarray(values, dtype=float)
    return np.interp(values, score, lam)


def lambda_equivalence(frontier_scores, steering_curve, B: int = 1000, seed: int = 0,
                       level: float = 0.95) -> LambdaEquivalence:
    """Steering multiplier whose curve value matches the median frontier score.

    The curve is inverted by piecewise-linear interpolation. The CI comes
    from a percentile bootstrap over models (rows of ``frontier_scores``).
    Scores outside the curve's range are clamped to its endpoints.
    """
    lam, score = _inverse_curve(steering_curve)
    scores = np.asarray(frontier_scores, dtype=float).ravel()
    if scores.size == 0:
        raise ValueError("no frontier scores")
    med = float(np.median(scores))
    clamped = not (score[0] <= med <= score[-1])
    if clamped:
        warnings.warn(f"median score {med:.4g} outside the steering curve range "
                      f"[{score[0]:.4g}, {score[-1]:.4g}]; clamped", ScoreOutOfRange, stacklevel=2)
    est = float(_invert(med, lam, score))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, scores.size, size=(B, scores.size))
    boot = _invert(np.median(scores[idx], axis=1), lam, score)
    alpha = 1 - level
    lo, hi = np.percentile(boot, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return LambdaEquivalence(lam=est, ci=(float(lo), float(hi)), median_score=med,
                             clamped=clamped, boot=boot)
