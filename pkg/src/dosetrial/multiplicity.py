"""Benjamini-Hochberg adjustment and hierarchical hypothesis families."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DuplicateTestId, InvalidConfig, InvalidP

TIERS = ("Primary", "Robustness", "Descriptive")


def bh_adjust(p) -> np.ndarray:
    """BH step-up adjusted p-values (same order as the input)."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        p = p.ravel()
    if p.size == 0:
        return p.copy()
    if not np.all(np.isfinite(p)) or (p < 0).any() or (p > 1).any():
        raise InvalidP("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    ranked = p[order] * m / np.arange(1, m + 1)
    # running minimum from the largest p downwards
    adj_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj_sorted, 1.0)
    return out


def bh_reject(p, alpha=0.05) -> np.ndarray:
    return bh_adjust(p) <= alpha


@dataclass
class HypothesisFamily:
    """Registered group of tests. ``tests`` maps test id to raw p.

    ``groups`` optionally splits a Robustness/Descriptive family into test
    groups (id -> group name); each group is corrected on its own. Without
    it, every test of a non-primary family forms its own group.
    """

    family_id: str
    tier: str
    tests: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tier not in TIERS:
            raise InvalidConfig(f"family {self.family_id}: unknown tier {self.tier!r}")
        for tid, p in self.tests.items():
            if not (0.0 <= float(p) <= 1.0):
                raise InvalidP(f"test {tid}: p={p} outside [0, 1]")


@dataclass(frozen=True)
class AdjustedTest:
    test_id: str
    family_id: str
    tier: str
    p: float
    p_adj: float
    scope: str
    m: int

    def to_dict(self):
        return {"test_id": self.test_id, "family": self.family_id, "tier": self.tier,
                "p": self.p, "p_adj": self.p_adj, "scope": self.scope, "m": self.m}


def apply_hierarchy(families) -> list[AdjustedTest]:
    """Primary families are adjusted family-wide; robustness and descriptive
    tests only within their own test group."""
    seen = {}
    for fam in families:
        for tid in fam.tests:
            if tid in seen:
                raise DuplicateTestId(f"test {tid!r} in families {seen[tid]} and {fam.family_id}")
            seen[tid] = fam.family_id
    out = []
    for fam in families:
        if not fam.tests:
            continue
        if fam.tier == "Primary":
            scopes = {f"family:{fam.family_id}": list(fam.tests)}
        else:
            scopes = {}
            for tid in fam.tests:
                g = fam.groups.get(tid, tid)
                scopes.setdefault(f"group:{fam.family_id}/{g}", []).append(tid)
        for scope, ids in scopes.items():
            raw = np.array([float(fam.tests[t]) for t in ids])
            adj = bh_adjust(raw)
            for t, p, pa in zip(ids, raw, adj):
                out.append(AdjustedTest(t, fam.family_id, fam.tier, float(p), float(pa),
                                        scope, len(ids)))
    return out


def global_adjust(tests: dict, scope="global") -> list[AdjustedTest]:
    """One BH correction over the union of the given tests."""
    ids = list(tests)
    adj = bh_adjust([tests[t] for t in ids])
    return [AdjustedTest(t, scope, "Descriptive", float(tests[t]), float(a), scope, len(ids))
            for t, a in zip(ids, adj)]


def to_frame(results) -> pd.DataFrame:
    cols = ["test_id", "family", "tier", "p", "p_adj", "scope", "m"]
    return pd.DataFrame([r.to_dict() for r in results], columns=cols)
