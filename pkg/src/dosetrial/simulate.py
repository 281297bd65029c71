"""Synthetic trials with known ground truth.

Every participant draws from its own PCG64 substream keyed by
``(seed, stream, participant index)``, so adding participants never changes
the draws of existing ones. Streams are derived from the outcome name.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, fields, replace
from itertools import product

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .data import DOMAINS, LAMBDA_LEVELS, ObservationTable, OutcomeInfo
from .errors import InvalidConfig

ARM_STREAM = 0x41524D53  # "ARMS"
CELLS = list(product(LAMBDA_LEVELS, DOMAINS, (False, True)))


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, stream: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def participant_ids(n: int) -> list[str]:
    return [f"P{i + 1:05d}" for i in range(n)]


# ---------------------------------------------------------------------------
# arm allocation
# ---------------------------------------------------------------------------

def _check_ratios(name, r, k):
    r = np.asarray(r, dtype=float)
    if r.shape != (k,) or (r < 0).any() or not math.isclose(r.sum(), 1.0, abs_tol=1e-9):
        raise InvalidConfig(f"{name} must be {k} non-negative ratios summing to 1, got {tuple(r)}")
    return r


def assign_arms(n: int, seed: int, lambda_ratios=None, domain_ratios=None,
                personalised_ratios=None) -> pd.DataFrame:
    """Randomise ``n`` participants over the 5 x 2 x 2 cells.

    Equal ratios use permuted blocks of the 20 cells, so every cell count is
    within one of every other at any ``n``. Unequal ratios draw each
    participant's cell independently.
    """
    lr = _check_ratios("lambda_ratios", lambda_ratios or [0.2] * 5, 5)
    dr = _check_ratios("domain_ratios", domain_ratios or [0.5] * 2, 2)
    pr = _check_ratios("personalised_ratios", personalised_ratios or [0.5] * 2, 2)
    probs = np.array([lr[LAMBDA_LEVELS.index(l)] * dr[DOMAINS.index(d)] * pr[int(p)]
                      for l, d, p in CELLS])
    cells = np.empty(n, dtype=np.int64)
    if np.allclose(probs, probs[0]):
        for b in range((n + len(CELLS) - 1) // len(CELLS)):
            perm = substream(seed, ARM_STREAM, b).permutation(len(CELLS))
            lo = b * len(CELLS)
            hi = min(n, lo + len(CELLS))
            cells[lo:hi] = perm[:hi - lo]
    else:
        for i in range(n):
            cells[i] = substream(seed, ARM_STREAM, i).choice(len(CELLS), p=probs)
    arms = pd.DataFrame([CELLS[c] for c in cells], columns=["lambda", "domain", "personalised"],
                        index=pd.Index(participant_ids(n), name="participant_id"))
    arms["personalised"] = arms["personalised"].astype(bool)
    return arms


# ---------------------------------------------------------------------------
# continuous repeated-measures outcome
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialGroundTruth:
    """Generative parameters of one repeated-measures outcome.

    The mean is ``intercept + sum_k lam[k] lambda^(k+1) + personalised P +
    domain D + time t + sum_k lam_personalised[k] lambda^(k+1) P + ... +
    lam_time lambda t + personalised_time P t + domain_time D t + baseline b``.
    """

    outcome: str = "outcome"
    n_participants: int = 500
    n_times: int = 10
    time_start: int = 1
    time_unit: str = "session"
    intercept: float = 50.0
    lam: tuple = (0.0,)
    personalised: float = 0.0
    domain: float = 0.0
    time: float = 0.0
    lam_personalised: tuple = (0.0,)
    lam_domain: tuple = (0.0,)
    lam_time: float = 0.0
    personalised_time: float = 0.0
    domain_time: float = 0.0
    baseline: float = 0.0
    baseline_mean: float = 50.0
    baseline_sd: float = 0.0
    sd_intercept: float = 0.0
    sd_slope: float = 0.0
    corr: float = 0.0
    sd_resid: float = 1.0
    lambda_ratios: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    domain_ratios: tuple = (0.5, 0.5)
    personalised_ratios: tuple = (0.5, 0.5)
    missing_prob: float = 0.0
    scale: tuple | None = None
    seed: int = 0
    effects_stream: str | None = None  # share (u0, u1) with another outcome's draws

    def __post_init__(self):
        for name in ("sd_intercept", "sd_slope", "sd_resid", "baseline_sd"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        if abs(self.corr) > 1:
            raise InvalidConfig("|corr| must be at most 1")
        if self.n_participants < 1 or self.n_times < 1 or self.time_start < 0:
            raise InvalidConfig("n_participants, n_times must be positive and time_start >= 0")
        if not 0 <= self.missing_prob < 1:
            raise InvalidConfig("missing_prob must lie in [0, 1)")
        for name in ("lam", "lam_personalised", "lam_domain"):
            if not 1 <= len(getattr(self, name)) <= 3:
                raise InvalidConfig(f"{name} needs 1 to 3 polynomial coefficients")
        _check_ratios("lambda_ratios", self.lambda_ratios, 5)
        _check_ratios("domain_ratios", self.domain_ratios, 2)
        _check_ratios("personalised_ratios", self.personalised_ratios, 2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrialGroundTruth":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown truth keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @property
    def times(self):
        return np.arange(self.time_start, self.time_start + self.n_times)


def _poly(coefs, lam):
    return sum(c * lam ** (k + 1) for k, c in enumerate(coefs))


def linear_predictor(truth: TrialGroundTruth, lam, personalised, domain_emotional, t,
                     baseline=0.0):
    """Fixed-effect mean for arrays of arm indicators and times."""
    lam = np.asarray(lam, dtype=float)
    P = np.asarray(personalised, dtype=float)
    D = np.asarray(domain_emotional, dtype=float)
    t = np.asarray(t, dtype=float)
    return (truth.intercept + _poly(truth.lam, lam) + truth.personalised * P
            + truth.domain * D + truth.time * t + _poly(truth.lam_personalised, lam) * P
            + _poly(truth.lam_domain, lam) * D + truth.lam_time * lam * t
            + truth.personalised_time * P * t + truth.domain_time * D * t
            + truth.baseline * np.asarray(baseline, dtype=float))


def _arms_for(truth, arms):
    if arms is None:
        return assign_arms(truth.n_participants, truth.seed, list(truth.lambda_ratios),
                           list(truth.domain_ratios), list(truth.personalised_ratios))
    if len(arms) < truth.n_participants:
        raise InvalidConfig("fewer assignments than participants")
    return arms.iloc[:truth.n_participants]


def _participant_draws(truth: TrialGroundTruth, i: int):
    rng = substream(truth.seed, stream_id(truth.outcome), i)
    z = rng.standard_normal(2)
    if truth.effects_stream is not None:
        z = substream(truth.seed, stream_id(truth.effects_stream), i).standard_normal(2)
    u0 = truth.sd_intercept * z[0]
    u1 = truth.sd_slope * (truth.corr * z[0] + math.sqrt(1 - truth.corr ** 2) * z[1])
    eps = truth.sd_resid * rng.standard_normal(truth.n_times)
    keep = rng.random(truth.n_times) >= truth.missing_prob
    b = truth.baseline_mean + truth.baseline_sd * rng.standard_normal()
    return u0, u1, eps, keep, b


def simulate_trial(truth: TrialGroundTruth, arms: pd.DataFrame | None = None,
                   return_effects: bool = False):
    """Simulate one repeated-measures outcome.

    With ``return_effects`` also returns a frame of each participant's true
    random intercept and slope.
    """
    arms = _arms_for(truth, arms)
    ids = list(arms.index)
    times = truth.times
    T = len(times)
    n = len(ids)
    u0 = np.empty(n)
    u1 = np.empty(n)
    eps = np.empty((n, T))
    keep = np.empty((n, T), dtype=bool)
    base = np.empty(n)
    for i in range(n):
        u0[i], u1[i], eps[i], keep[i], base[i] = _participant_draws(truth, i)
    lam = arms["lambda"].to_numpy(dtype=float)[:, None]
    P = arms["personalised"].to_numpy(dtype=float)[:, None]
    D = (arms["domain"] == "Emotional").to_numpy(dtype=float)[:, None]
    tt = times[None, :].astype(float)
    mu = linear_predictor(truth, lam, P, D, tt, base[:, None])
    y = mu + u0[:, None] + u1[:, None] * tt + eps
    if truth.scale is not None:
        y = np.clip(y, *truth.scale)
    pid = np.repeat(np.array(ids, dtype=object), T)
    obs = pd.DataFrame({"participant_id": pid, "time": np.tile(times, n),
                        "outcome": truth.outcome, "item": None, "value": y.ravel(),
                        "baseline": np.repeat(base, T) if truth.baseline_sd > 0 or truth.baseline
                        else np.nan})
    obs = obs[keep.ravel()].reset_index(drop=True)
    info = OutcomeInfo(truth.outcome, "continuous", truth.scale, truth.time_unit)
    table = ObservationTable(obs, arms.copy(), {truth.outcome: info})
    if return_effects:
        eff = pd.DataFrame({"u0": u0, "u1": u1, "slope": truth.time + u1},
                           index=pd.Index(ids, name="participant_id"))
        return table, eff
    return table


# ---------------------------------------------------------------------------
# binary endpoint
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinaryGroundTruth:
    """Bernoulli endpoint.

    Either ``cohorts`` (name, n, log-odds) defines fixed-size groups, or the
    log-odds follow the trial arms: ``intercept + f(lambda) + personalised P
    + domain D``.
    """

    outcome: str = "binary"
    cohorts: tuple | None = None
    n_participants: int = 1000
    intercept: float = 0.0
    lam: tuple = (0.0,)
    personalised: float = 0.0
    domain: float = 0.0
    time: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.cohorts is not None:
            if len(self.cohorts) < 1:
                raise InvalidConfig("cohorts must not be empty")
            for c in self.cohorts:
                if len(c) != 3 or int(c[1]) < 1 or not np.isfinite(c[2]):
                    raise InvalidConfig(f"cohort entries are (name, n >= 1, log-odds): {c}")
        elif self.n_participants < 1:
            raise InvalidConfig("n_participants must be positive")

    @classmethod
    def from_rates(cls, rates: dict, outcome="binary", seed=0) -> "BinaryGroundTruth":
        """``rates`` maps cohort name to (n, event probability)."""
        return cls(outcome=outcome, seed=seed,
                   cohorts=tuple((str(k), int(n), float(logit(p))) for k, (n, p) in rates.items()))


def simulate_binary_endpoint(truth: BinaryGroundTruth, arms: pd.DataFrame | None = None):
    """One 0/1 value per participant at ``truth.time``.

    Cohort mode returns a table without treatment assignments and a
    ``cohort`` covariate.
    """
    stream = stream_id(truth.outcome)
    covariates = None
    levels = {}
    if truth.cohorts is not None:
        eta, names = [], []
        for name, n, e in truth.cohorts:
            eta += [e] * int(n)
            names += [name] * int(n)
        eta = np.array(eta)
        ids = participant_ids(len(eta))
        covariates = pd.DataFrame({"cohort": names}, index=pd.Index(ids, name="participant_id"))
        levels = {"cohort": tuple(c[0] for c in truth.cohorts)}
        arms = None
    else:
        if arms is None:
            arms = assign_arms(truth.n_participants, truth.seed)
        arms = arms.iloc[:truth.n_participants]
        ids = list(arms.index)
        lam = arms["lambda"].to_numpy(dtype=float)
        eta = (truth.intercept + _poly(truth.lam, lam)
               + truth.personalised * arms["personalised"].to_numpy(dtype=float)
               + truth.domain * (arms["domain"] == "Emotional").to_numpy(dtype=float))
    u = np.array([substream(truth.seed, stream, i).random() for i in range(len(ids))])
    y = (u < expit(eta)).astype(float)
    obs = pd.DataFrame({"participant_id": ids, "time": truth.time, "outcome": truth.outcome,
                        "item": None, "value": y})
    info = OutcomeInfo(truth.outcome, "binary", None, "end")
    return ObservationTable(obs, None if arms is None else arms.copy(), {truth.outcome: info},
                            covariates, levels)


# ---------------------------------------------------------------------------
# frontier panel (crossed model x prompt)
# ---------------------------------------------------------------------------

def simulate_frontier_panel(n_models: int, n_prompts: int, trend_per_year: float = 0.95,
                            sd_model: float = 0.75, sd_prompt: float = 1.0,
                            sd_resid: float = 1.0, intercept: float = 3.0,
                            max_years: float = 2.0, seed: int = 0,
                            outcome: str = "frontier_score") -> ObservationTable:
    """Scores of ``n_models`` AI models on ``n_prompts`` prompts.

    Models are stored as participants and prompts as items; each model's
    release time (years since the earliest model) is the covariate
    ``years``, drawn uniformly on [0, max_years].
    """
    if n_models < 1 or n_prompts < 1:
        raise InvalidConfig("panel dimensions must be positive")
    if min(sd_model, sd_prompt, sd_resid) < 0:
        raise InvalidConfig("standard deviations must be non-negative")
    stream = stream_id(outcome)
    years = np.empty(n_models)
    um = np.empty(n_models)
    eps = np.empty((n_models, n_prompts))
    for i in range(n_models):
        rng = substream(seed, stream, i)
        years[i] = rng.uniform(0.0, max_years)
        um[i] = sd_model * rng.standard_normal()
        eps[i] = sd_resid * rng.standard_normal(n_prompts)
    up = np.array([sd_prompt * substream(seed, stream + 1, j).standard_normal()
                   for j in range(n_prompts)])
    y = intercept + trend_per_year * years[:, None] + um[:, None] + up[None, :] + eps
    models = [f"M{i + 1:03d}" for i in range(n_models)]
    prompts = [f"Q{j + 1:03d}" for j in range(n_prompts)]
    obs = pd.DataFrame({"participant_id": np.repeat(models, n_prompts),
                        "time": 0, "outcome": outcome,
                        "item": np.tile(prompts, n_models), "value": y.ravel()})
    cov = pd.DataFrame({"years": years}, index=pd.Index(models, name="participant_id"))
    info = OutcomeInfo(outcome, "continuous", None, "none")
    return ObservationTable(obs, None, {outcome: info}, cov)


# ---------------------------------------------------------------------------
# default truths
# ---------------------------------------------------------------------------

def contrast_of(truth: TrialGroundTruth, split=((0.5, 1.0), (-0.5, -1.0))) -> float:
    """True equal-weight marginal contrast between two lambda sets,
    averaged over domain, personalisation and the observed time points."""
    t = truth.times.astype(float)
    out = []
    for side in split:
        vals = [linear_predictor(truth, l, p, d, t, truth.baseline_mean).mean()
                for l in side for p in (0, 1) for d in (0, 1)]
        out.append(np.mean(vals))
    return float(out[0] - out[1])


def slope_of(truth: TrialGroundTruth, lam_levels) -> float:
    """True time slope averaged over ``lam_levels``, domain and personalisation."""
    vals = [truth.time + truth.lam_time * l + truth.personalised_time * p + truth.domain_time * d
            for l in lam_levels for p in (0, 1) for d in (0, 1)]
    return float(np.mean(vals))


def likeability_truth(n_participants=2000, n_times=20, seed=0, contrast=7.40,
                      slope_pos=-0.17, slope_neg=0.19) -> TrialGroundTruth:
    """Cubic dose-response with a given positive-vs-negative lambda contrast
    and given pooled time slopes for lambda > 0 and lambda < 0.

    The linear lambda coefficient is solved so the marginal contrast (which
    also picks up the lambda-by-time interaction averaged over sessions)
    equals ``contrast``.
    """
    lam_time = (slope_pos - slope_neg) / 1.5
    base = TrialGroundTruth(
        outcome="likeability", n_participants=n_participants, n_times=n_times, time_start=1,
        intercept=60.0, lam=(0.0, -3.0, -2.0), personalised=1.5, domain=-1.0,
        time=(slope_pos + slope_neg) / 2, lam_personalised=(0.8,), lam_domain=(-0.6,),
        lam_time=lam_time, sd_intercept=15.0, sd_slope=0.4, corr=-0.2, sd_resid=10.0,
        seed=seed)
    c0 = contrast_of(base)
    b1 = (contrast - c0) / 1.5
    return replace(base, lam=(b1, -3.0, -2.0))


def end_of_study_truth(shape="cubic", n_participants=2000, seed=0) -> TrialGroundTruth:
    """Single-time-point outcome (OLS form) with cubic or linear lambda."""
    lam = {"cubic": (10.0, -4.0, -10.0), "linear": (6.0,)}[shape]
    return TrialGroundTruth(outcome=f"eos_{shape}", n_participants=n_participants, n_times=1,
                            time_start=1, time_unit="end", intercept=50.0, lam=lam,
                            personalised=2.0, domain=3.0, sd_resid=20.0, seed=seed)


def recovery_truth(n_participants=500, n_times=10, seed=0) -> TrialGroundTruth:
    """Every fixed effect of the repeated-measures model set to a non-zero value."""
    return TrialGroundTruth(
        outcome="recovery", n_participants=n_participants, n_times=n_times, time_start=1,
        intercept=50.0, lam=(5.0, -3.0, -2.0), personalised=2.0, domain=-1.5, time=0.3,
        lam_personalised=(1.0,), lam_domain=(-1.2,), lam_time=-0.25, personalised_time=0.1,
        domain_time=-0.15, sd_intercept=10.0, sd_slope=0.5, corr=0.2, sd_resid=8.0, seed=seed)


def true_coefficients(truth: TrialGroundTruth, labels) -> np.ndarray:
    """Truth mapped onto design column labels of the repeated-measures model."""
    lookup = {"(Intercept)": truth.intercept, "personalised[True]": truth.personalised,
              "domain[Emotional]": truth.domain, "time": truth.time,
              "lambda:time": truth.lam_time, "personalised[True]:time": truth.personalised_time,
              "domain[Emotional]:time": truth.domain_time, "baseline": truth.baseline}
    for k in range(3):
        name = "lambda" if k == 0 else f"lambda^{k + 1}"
        lookup[name] = truth.lam[k] if k < len(truth.lam) else 0.0
        lookup[f"{name}:personalised[True]"] = (truth.lam_personalised[k]
                                                if k < len(truth.lam_personalised) else 0.0)
        lookup[f"{name}:domain[Emotional]"] = (truth.lam_domain[k]
                                               if k < len(truth.lam_domain) else 0.0)
    return np.array([lookup[lab] for lab in labels])


# ---------------------------------------------------------------------------
# multi-outcome study for the pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyTruth:
    """A complete synthetic study: daily ratings, weekly attachment, end-of-study
    outcomes, psychometric items pre and post, and pre-treatment preferences."""

    n_participants: int = 2000
    n_sessions: int = 20
    n_weeks: int = 4
    seed: int = 0
    dropout_prob: float = 0.05
    missing_prob: float = 0.03
    sessions: tuple = ()
    weekly: tuple = ()
    end_of_study: tuple = ()
    goodbye: BinaryGroundTruth | None = None
    psych_loadings: tuple = ((0.8, 0.0), (0.7, 0.0), (0.75, 0.1), (0.6, 0.0),
                             (0.0, 0.8), (0.1, 0.7), (0.0, 0.65), (0.0, 0.7))
    psych_phi: float = 0.3
    psych_shift: tuple = (0.25, 0.0)  # post minus pre factor mean, companionship arms
    n_preference_items: int = 20
    preference_separation: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.dropout_prob < 1:
            raise InvalidConfig("dropout_prob must lie in [0, 1)")


def default_study(n_participants=2000, seed=0, n_sessions=20, n_weeks=4) -> StudyTruth:
    like = likeability_truth(n_participants, n_sessions, seed)
    # engagingness shares each participant's latent level and trend with likeability
    engage = replace(like, outcome="engagingness", intercept=58.0,
                     lam=(like.lam[0] * 0.75, -2.5, -1.5), effects_stream="likeability")
    helpful = TrialGroundTruth(outcome="helpfulness", n_participants=n_participants,
                               n_times=n_sessions, intercept=70.0, lam=(-3.0, -1.0),
                               time=0.05, lam_time=-0.05, domain=-2.0, sd_intercept=12.0,
                               sd_slope=0.3, sd_resid=9.0, seed=seed)
    distress = TrialGroundTruth(outcome="separation_distress", n_participants=n_participants,
                                n_times=n_weeks, time_unit="week", intercept=35.0,
                                lam=(4.0, -1.0), domain=3.0, time=0.8, lam_time=1.2,
                                domain_time=0.8, sd_intercept=15.0, sd_slope=2.0,
                                sd_resid=8.0, seed=seed)
    future = TrialGroundTruth(outcome="future_companionship", n_participants=n_participants,
                              n_times=1, time_start=n_weeks, time_unit="end", intercept=10.0,
                              lam=(5.0, -2.0, -1.0), personalised=1.0, domain=4.0,
                              baseline=0.7, baseline_mean=40.0, baseline_sd=20.0,
                              sd_resid=15.0, seed=seed)
    goodbye = BinaryGroundTruth(outcome="goodbye", n_participants=n_participants,
                                intercept=-0.25, lam=(0.3, -0.3, -0.3), domain=0.2,
                                time=n_weeks, seed=seed)
    # ratings are recorded on a bounded 0-100 slider
    bounded = lambda t: replace(t, scale=(0.0, 100.0))  # noqa: E731
    return StudyTruth(n_participants=n_participants, n_sessions=n_sessions, n_weeks=n_weeks,
                      seed=seed, sessions=tuple(map(bounded, (like, engage, helpful))),
                      weekly=(bounded(distress),), end_of_study=(bounded(future),),
                      goodbye=goodbye)


def simulate_study(truth: StudyTruth) -> ObservationTable:
    n = truth.n_participants
    arms = assign_arms(n, truth.seed)
    ids = list(arms.index)
    drop_rng = [substream(truth.seed, stream_id("dropout"), i) for i in range(n)]
    # dropout week: participants who drop out lose every row after it
    dropped = np.array([r.random() < truth.dropout_prob for r in drop_rng])
    drop_week = np.array([int(r.integers(1, truth.n_weeks + 1)) for r in drop_rng])
    frames, registry = [], {}

    def add(table, horizon=None):
        obs = table.observations.copy()
        if horizon is not None:
            pos = pd.Series(np.arange(n), index=ids)[obs["participant_id"]].to_numpy()
            limit = np.where(dropped[pos], horizon(drop_week[pos]), np.inf)
            obs = obs[obs["time"].to_numpy() < limit]
        frames.append(obs)
        registry.update(table.registry)

    sessions_per_week = truth.n_sessions / truth.n_weeks
    for t in truth.sessions:
        t = replace(t, n_participants=n, n_times=truth.n_sessions, seed=truth.seed,
                    missing_prob=truth.missing_prob)
        add(simulate_trial(t, arms), horizon=lambda w: w * sessions_per_week + 1)
    for t in truth.weekly:
        t = replace(t, n_participants=n, n_times=truth.n_weeks, seed=truth.seed,
                    missing_prob=truth.missing_prob)
        add(simulate_trial(t, arms), horizon=lambda w: w + 1)
    final = lambda w: -np.ones_like(w, dtype=float)  # noqa: E731 - dropouts never finish
    for t in truth.end_of_study:
        t = replace(t, n_participants=n, seed=truth.seed)
        add(simulate_trial(t, arms), horizon=final)
    if truth.goodbye is not None:
        g = replace(truth.goodbye, n_participants=n, seed=truth.seed)
        add(simulate_binary_endpoint(g, arms), horizon=final)
    psych_pre, psych_post = _psych_items(truth, arms)
    add(psych_pre)
    add(psych_post, horizon=final)
    add(_preference_items(truth, arms))
    obs = pd.concat(frames, ignore_index=True)
    return ObservationTable(obs, arms, registry)


def _psych_items(truth: StudyTruth, arms):
    L = np.array(truth.psych_loadings)
    d, k = L.shape
    phi = np.array([[1.0, truth.psych_phi], [truth.psych_phi, 1.0]])
    C = np.linalg.cholesky(phi)
    uniq = np.sqrt(np.clip(1 - np.einsum("ij,jk,ik->i", L, phi, L), 0.05, None))
    cuts = np.array([-1.5, -0.5, 0.5, 1.5])
    companion = ((arms["lambda"] > 0) & (arms["domain"] == "Emotional")).to_numpy()
    stream = stream_id("psychosocial")
    pre, post = [], []
    for i in range(len(arms)):
        rng = substream(truth.seed, stream, i)
        f = C @ rng.standard_normal(k)
        shift = np.array(truth.psych_shift) * companion[i]
        f_post = f + shift + 0.3 * rng.standard_normal(k)
        for store, fm in ((pre, f), (post, f_post)):
            latent = L @ fm + uniq * rng.standard_normal(d)
            store.append(np.digitize(latent, cuts) + 1)
    items = [f"psych_{j + 1:02d}" for j in range(d)]
    info = OutcomeInfo("psychosocial", "continuous", (1.0, 5.0), "phase")
    out = []
    for t, store in ((0, pre), (1, post)):
        vals = np.array(store, dtype=float)
        obs = pd.DataFrame({"participant_id": np.repeat(arms.index.to_numpy(), d),
                            "time": t, "outcome": "psychosocial",
                            "item": np.tile(items, len(arms)), "value": vals.ravel()})
        out.append(ObservationTable(obs, arms, {"psychosocial": info}))
    return out


def _preference_items(truth: StudyTruth, arms):
    m = truth.n_preference_items
    stream = stream_id("preferences")
    profile = np.where(np.arange(m) % 2 == 0, 1.0, -1.0) * truth.preference_separation / 2
    rows = []
    for i in range(len(arms)):
        rng = substream(truth.seed, stream, i)
        cluster = 1.0 if rng.random() < 0.5 else -1.0
        rows.append(50 + 15 * (cluster * profile + rng.standard_normal(m)))
    items = [f"pref_{j + 1:02d}" for j in range(m)]
    obs = pd.DataFrame({"participant_id": np.repeat(arms.index.to_numpy(), m), "time": 0,
                        "outcome": "preferences", "item": np.tile(items, len(arms)),
                        "value": np.array(rows).ravel()})
    return ObservationTable(obs, arms, {"preferences": OutcomeInfo("preferences", "continuous",
                                                                   None, "pre")})
