"""Liking/wanting trajectory profiles, one-sided proportion tests with number
needed to harm, and decoupling-score t tests."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DegenerateVariance, EmptyOverlap

PROFILES = ("DecoupledDependency", "DecoupledSatiation", "AlignedEngagement",
            "AlignedDisengagement")
Z95 = float(stats.norm.ppf(0.975))


def _profile(liking, wanting, tie):
    inc_l, inc_w = liking > 0, wanting > 0
    if tie == "strict":
        dec_l, dec_w = liking < 0, wanting < 0
    elif tie == "nonincreasing":
        # a zero slope is treated as decreasing
        dec_l, dec_w = liking <= 0, wanting <= 0
    else:
        raise ValueError(f"unknown tie rule {tie!r}")
    if dec_l and inc_w:
        return "DecoupledDependency"
    if inc_l and dec_w:
        return "DecoupledSatiation"
    if inc_l and inc_w:
        return "AlignedEngagement"
    return "AlignedDisengagement"


@dataclass
class ProfileTable:
    frame: pd.DataFrame
    dropped: int

    def counts(self) -> pd.Series:
        return self.frame["profile"].value_counts().reindex(PROFILES, fill_value=0)


def classify_profiles(liking, wanting, tie: str = "strict") -> ProfileTable:
    """Classify participants by the signs of their liking and wanting slopes.

    ``liking`` and ``wanting`` map participant id to slope. Ids present in
    only one of them are dropped and counted. Under the default rule a zero
    slope is neither increasing nor decreasing, so it lands in
    AlignedDisengagement unless the other slope decides otherwise.
    """
    lk = pd.Series(liking, dtype=float)
    wt = pd.Series(wanting, dtype=float)
    lk.index = lk.index.astype(str)
    wt.index = wt.index.astype(str)
    common = sorted(set(lk.index) & set(wt.index))
    if not common:
        raise EmptyOverlap("no participant has both a liking and a wanting slope")
    dropped = len(set(lk.index) ^ set(wt.index))
    rows = [{"participant_id": pid, "liking_slope": float(lk[pid]),
             "wanting_slope": float(wt[pid]),
             "profile": _profile(lk[pid], wt[pid], tie),
             "decoupling_score": float(wt[pid] - lk[pid])} for pid in common]
    return ProfileTable(pd.DataFrame(rows), dropped)


@dataclass
class ProportionTest:
    risk_exposed: float
    risk_control: float
    z: float
    p: float
    odds_ratio: float
    or_ci: tuple
    nnh: float | None
    nnh_ceiling: int | None
    zero_cell: bool
    direction: str

    def to_dict(self):
        return {"risk_exposed": self.risk_exposed, "risk_control": self.risk_control,
                "z": self.z, "p": self.p, "odds_ratio": self.odds_ratio,
                "or_lower": self.or_ci[0], "or_upper": self.or_ci[1], "nnh": self.nnh,
                "nnh_ceiling": self.nnh_ceiling, "zero_cell": self.zero_cell,
                "direction": self.direction}


def _counts(arm):
    if isinstance(arm, dict):
        k, n = arm["k"], arm["n"]
    else:
        k, n = arm
    k, n = int(k), int(n)
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    return k, n


def number_needed_to_harm(exposed, control):
    """(unrounded, ceiling) NNH from integer counts, or (None, None) when the
    exposed risk is not higher."""
    ke, ne = _counts(exposed)
    kc, nc = _counts(control)
    rd = Fraction(ke, ne) - Fraction(kc, nc)
    if rd <= 0:
        return None, None
    nnh = 1 / rd
    return float(nnh), math.ceil(nnh)


def proportion_test_one_sided(exposed, control, direction: str = "greater",
                              pooled: bool = True) -> ProportionTest:
    """Two-proportion z test of H1: risk(exposed) > risk(control) (or <).

    The odds ratio carries a Wald CI on the log scale; a zero cell adds 0.5
    to every cell and sets ``zero_cell``.
    """
    if direction not in ("greater", "less"):
        raise ValueError(direction)
    ke, ne = _counts(exposed)
    kc, nc = _counts(control)
    pe, pc = ke / ne, kc / nc
    if pooled:
        pp = (ke + kc) / (ne + nc)
        var = pp * (1 - pp) * (1 / ne + 1 / nc)
    else:
        var = pe * (1 - pe) / ne + pc * (1 - pc) / nc
    diff = pe - pc
    if var > 0:
        z = diff / math.sqrt(var)
    else:
        z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    p = float(stats.norm.sf(z) if direction == "greater" else stats.norm.cdf(z))
    cells = np.array([ke, ne - ke, kc, nc - kc], dtype=float)
    zero = bool((cells == 0).any())
    if zero:
        cells = cells + 0.5
    a, b, c, d = cells
    log_or = math.log(a * d / (b * c))
    se = math.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
    nnh, nnh_ceil = number_needed_to_harm((ke, ne), (kc, nc))
    return ProportionTest(risk_exposed=pe, risk_control=pc, z=float(z), p=p,
                          odds_ratio=math.exp(log_or),
                          or_ci=(math.exp(log_or - Z95 * se), math.exp(log_or + Z95 * se)),
                          nnh=nnh, nnh_ceiling=nnh_ceil, zero_cell=zero, direction=direction)


@dataclass
class DecouplingTest:
    t: float
    df: float
    p: float
    cohens_d: float
    mean_exposed: float
    mean_control: float

    def to_dict(self):
        return dict(self.__dict__)


def decoupling_ttest(exposed, control, direction: str = "greater") -> DecouplingTest:
    """Welch one-sided t test with Cohen's d on the pooled SD."""
    x = np.asarray(exposed, dtype=float)
    y = np.asarray(control, dtype=float)
    if x.size < 2 or y.size < 2:
        raise ValueError("need at least two observations per arm")
    vx, vy = x.var(ddof=1), y.var(ddof=1)
    if vx == 0 and vy == 0:
        raise DegenerateVariance("both arms have zero variance")
    res = stats.ttest_ind(x, y, equal_var=False, alternative=direction)
    nx, ny = x.size, y.size
    sp = math.sqrt(((nx - 1) * vx + (ny - 1) * vy) / (nx + ny - 2))
    d = (x.mean() - y.mean()) / sp
    return DecouplingTest(t=float(res.statistic), df=float(res.df), p=float(res.pvalue),
                          cohens_d=float(d), mean_exposed=float(x.mean()),
                          mean_control=float(y.mean()))


def profile_contrast(profiles: ProfileTable, exposed_ids, profile="DecoupledDependency",
                     control_ids=None, direction="greater") -> ProportionTest:
    """Proportion of ``profile`` among exposed participants versus the rest
    (or versus ``control_ids``)."""
    f = profiles.frame
    exposed_ids = {str(x) for x in exposed_ids}
    is_exp = f["participant_id"].isin(exposed_ids)
    is_ctl = f["participant_id"].isin({str(x) for x in control_ids}) if control_ids is not None \
        else ~is_exp
    hit = f["profile"] == profile
    return proportion_test_one_sided((int((hit & is_exp).sum()), int(is_exp.sum())),
                                     (int((hit & is_ctl).sum()), int(is_ctl.sum())),
                                     direction=direction)


def decoupling_contrast(profiles: ProfileTable, exposed_ids, control_ids=None,
                        direction="greater") -> DecouplingTest:
    f = profiles.frame
    exposed_ids = {str(x) for x in exposed_ids}
    is_exp = f["participant_id"].isin(exposed_ids)
    is_ctl = f["participant_id"].isin({str(x) for x in control_ids}) if control_ids is not None \
        else ~is_exp
    return decoupling_ttest(f.loc[is_exp, "decoupling_score"], f.loc[is_ctl, "decoupling_score"],
                            direction=direction)
