"""Declarative model specifications and their design matrices.

A compact formula such as::

    value ~ poly(lambda,3) + personalised + domain + time
            + lambda:personalised + lambda:domain + lambda:time
            + personalised:time + domain:time + (1 + time | participant)

is parsed into a :class:`ModelSpec`. :func:`build_design` realises it on an
observation table as a fixed-effects matrix ``X``, per-grouping random-effect
blocks and the response ``y``. The :class:`DesignInfo` it returns can re-create
rows of ``X`` for arbitrary covariate settings, which is what the marginal-means
code evaluates.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from itertools import combinations, product

import numpy as np
import pandas as pd

from .data import DOMAINS, LAMBDA_LEVELS, ObservationTable
from .errors import (
    ConfigError,
    EmptyFactorLevel,
    GridOutsideDesign,
    RankDeficient,
    UnknownVariable,
)

DEFAULT_REFERENCES = {"domain": "Political", "personalised": False}
DEFAULT_FACTORS = ("domain", "personalised", "item", "cohort", "outcome_item")
TIME_VAR = "time"
DOSE_VAR = "lambda"


# ---------------------------------------------------------------------------
# term types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Intercept:
    def label(self):
        return "1"


@dataclass(frozen=True)
class PolyDose:
    order: int = 1
    var: str = DOSE_VAR
    selectable: bool = True

    def __post_init__(self):
        if not 1 <= self.order <= 3:
            raise ConfigError(f"polynomial order {self.order} outside 1..3")

    def label(self):
        return f"poly({self.var},{self.order})" if self.selectable else self.var


@dataclass(frozen=True)
class Factor:
    name: str
    reference: object = None

    def label(self):
        return self.name


@dataclass(frozen=True)
class Covariate:
    name: str

    def label(self):
        return self.name


@dataclass(frozen=True)
class TimeLinear:
    var: str = TIME_VAR

    def label(self):
        return self.var


@dataclass(frozen=True)
class Interaction:
    terms: tuple

    def __post_init__(self):
        bases = [_base_name(t) for t in self.terms]
        if len(set(bases)) != len(bases):
            raise ConfigError(f"interaction repeats a base term: {':'.join(bases)}")
        if any(isinstance(t, (Interaction, Intercept)) for t in self.terms):
            raise ConfigError("interactions combine simple terms only")

    def label(self):
        return ":".join(t.label() for t in self.terms)


def _base_name(term):
    if isinstance(term, PolyDose):
        return term.var
    if isinstance(term, TimeLinear):
        return term.var
    if isinstance(term, Intercept):
        return "1"
    return term.name


@dataclass(frozen=True)
class RandomSpec:
    grouping: str
    terms: tuple = ("Intercept",)
    structure: str = "IntSlopeCorrelated"

    def __post_init__(self):
        if not self.terms or any(t not in ("Intercept", "TimeSlope") for t in self.terms):
            raise ConfigError(f"random terms must be drawn from Intercept/TimeSlope: {self.terms}")
        if self.structure not in ("IntSlopeCorrelated", "IndependentComponents"):
            raise ConfigError(f"unknown random structure {self.structure}")

    @property
    def has_slope(self):
        return "TimeSlope" in self.terms

    def label(self):
        parts = ["1" if t == "Intercept" else TIME_VAR for t in self.terms]
        if "Intercept" not in self.terms:
            parts = ["0"] + parts
        bar = "||" if self.structure == "IndependentComponents" and len(self.terms) > 1 else "|"
        return f"({' + '.join(parts)} {bar} {self.grouping})"


@dataclass(frozen=True)
class ModelSpec:
    outcome: str
    fixed: tuple
    random: tuple = ()
    family: str = "gaussian"
    baseline: bool = False
    references: dict = field(default_factory=dict, hash=False, compare=True)
    response: str = "value"

    def __post_init__(self):
        if self.family not in ("gaussian", "binomial"):
            raise ConfigError(f"unknown family {self.family}")
        if self.family == "binomial" and self.random:
            raise ConfigError("binomial models are fixed-effects only")
        groups = [r.grouping for r in self.random]
        if len(set(groups)) != len(groups):
            raise ConfigError("each grouping factor may appear in one random term")
        if len(self.random) > 1 and any(r.has_slope for r in self.random):
            raise ConfigError("crossed random effects are restricted to intercepts")
        if len(self.random) > 2:
            raise ConfigError("at most two crossed grouping factors are supported")
        if self.baseline and not any(isinstance(t, Covariate) and t.name == "baseline"
                                     for t in self.fixed):
            object.__setattr__(self, "fixed", tuple(self.fixed) + (Covariate("baseline"),))

    @classmethod
    def from_formula(cls, formula: str, outcome: str, family="gaussian", references=None,
                     factors=(), baseline=False):
        response, fixed, random = parse_formula(formula, factors=factors)
        refs = dict(DEFAULT_REFERENCES)
        refs.update(references or {})
        return cls(outcome=outcome, fixed=tuple(fixed), random=tuple(random), family=family,
                   baseline=baseline, references=refs, response=response)

    @property
    def formula(self) -> str:
        parts = [t.label() for t in self.fixed if not isinstance(t, Intercept)]
        if not any(isinstance(t, Intercept) for t in self.fixed):
            parts = ["0"] + parts
        parts += [r.label() for r in self.random]
        return f"{self.response} ~ " + " + ".join(parts or ["1"])

    @property
    def poly_order(self) -> int | None:
        orders = [t.order for t in _walk(self.fixed) if isinstance(t, PolyDose) and t.selectable]
        return max(orders) if orders else None

    def with_poly_order(self, order: int) -> "ModelSpec":
        """Same model with every ``poly(lambda, k)`` term set to ``order``."""
        def swap(t):
            if isinstance(t, PolyDose) and t.selectable:
                return replace(t, order=order)
            if isinstance(t, Interaction):
                return Interaction(tuple(swap(s) for s in t.terms))
            return t
        return replace(self, fixed=tuple(swap(t) for t in self.fixed))

    def without_random(self) -> "ModelSpec":
        return replace(self, random=())


def _walk(terms):
    for t in terms:
        if isinstance(t, Interaction):
            yield from t.terms
        else:
            yield t


# ---------------------------------------------------------------------------
# formula parsing
# ---------------------------------------------------------------------------

_RANDOM_RE = re.compile(r"\(([^()|]*?)(\|\|?)\s*([A-Za-z_][\w]*)\s*\)")
_POLY_RE = re.compile(r"^poly\(\s*([A-Za-z_]\w*)\s*,\s*(\d+)\s*\)$")


def parse_formula(formula: str, factors=()):
    """Parse ``lhs ~ rhs`` into (response, fixed terms, random specs)."""
    if "~" not in formula:
        raise ConfigError(f"formula needs '~': {formula!r}")
    lhs, rhs = formula.split("~", 1)
    response = lhs.strip() or "value"
    factor_names = set(DEFAULT_FACTORS) | set(factors)

    random = []
    for inner, bar, group in _RANDOM_RE.findall(rhs):
        parts = [p.strip() for p in inner.split("+") if p.strip()]
        intercept = True
        terms = []
        for p in parts:
            if p == "0" or p == "-1":
                intercept = False
            elif p == "1":
                pass
            elif p == TIME_VAR:
                terms.append("TimeSlope")
            else:
                raise ConfigError(f"unsupported random term {p!r} (use 1 and/or {TIME_VAR})")
        if intercept:
            terms.insert(0, "Intercept")
        structure = "IndependentComponents" if bar == "||" else "IntSlopeCorrelated"
        random.append(RandomSpec(group, tuple(terms), structure))
    rhs = _RANDOM_RE.sub(" ", rhs)

    fixed = [Intercept()]
    for chunk in _split_plus(rhs):
        chunk = chunk.strip()
        if not chunk:
            continue
        if chunk in ("0", "-1"):
            fixed = [t for t in fixed if not isinstance(t, Intercept)]
            continue
        if chunk == "1":
            continue
        for term in _expand_star(chunk):
            parsed = [_parse_simple(s, factor_names) for s in term]
            t = parsed[0] if len(parsed) == 1 else Interaction(tuple(parsed))
            if t not in fixed:
                fixed.append(t)
    return response, fixed, random


def _split_plus(s):
    out, depth, cur = [], 0, []
    for ch in s:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "+" and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    return out


def _expand_star(chunk):
    """``a*b`` -> a, b, a:b ; ``a:b`` -> a:b."""
    if "*" not in chunk:
        return [[p.strip() for p in chunk.split(":")]]
    factors = [f.strip() for f in chunk.split("*")]
    out = []
    for r in range(1, len(factors) + 1):
        for combo in combinations(factors, r):
            pieces = []
            for f in combo:
                pieces.extend(p.strip() for p in f.split(":"))
            out.append(pieces)
    return out


def _parse_simple(s, factor_names):
    m = _POLY_RE.match(s)
    if m:
        return PolyDose(int(m.group(2)), m.group(1), selectable=True)
    if not re.match(r"^[A-Za-z_]\w*$", s):
        raise ConfigError(f"cannot parse term {s!r}")
    if s == DOSE_VAR:
        return PolyDose(1, DOSE_VAR, selectable=False)
    if s == TIME_VAR:
        return TimeLinear()
    if s in factor_names:
        return Factor(s)
    return Covariate(s)


# ---------------------------------------------------------------------------
# design realisation
# ---------------------------------------------------------------------------

@dataclass
class RandomBlock:
    """Incidence structure of one grouping factor.

    ``Z`` is the n x q_g matrix of random-term covariates (1 and/or time);
    ``codes`` maps each row to its group level.
    """

    spec: RandomSpec
    levels: list
    codes: np.ndarray
    Z: np.ndarray

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def q(self):
        return self.Z.shape[1]


@dataclass
class DesignInfo:
    spec: ModelSpec
    all_labels: list
    keep: np.ndarray
    factor_levels: dict
    numeric_means: dict
    time_points: list
    dropped: list

    @property
    def labels(self):
        return [lab for lab, k in zip(self.all_labels, self.keep) if k]

    def transform(self, frame: pd.DataFrame) -> np.ndarray:
        """Fixed-effects rows for new covariate settings."""
        for name, levels in self.factor_levels.items():
            if name in frame.columns:
                vals = frame[name].map(_level_key)
                bad = ~vals.isin([_level_key(lv) for lv in levels])
                if bad.any():
                    raise GridOutsideDesign(
                        f"{name}={frame[name][bad].iloc[0]!r} was not observed when fitting")
        labels, cols = _fixed_columns(self.spec, frame, self.factor_levels)
        X = np.column_stack(cols) if cols else np.zeros((len(frame), 0))
        return X[:, self.keep]

    def variables(self) -> set:
        names = set()
        for t in _walk(self.spec.fixed):
            if not isinstance(t, Intercept):
                names.add(_base_name(t))
        return names

    def to_dict(self):
        return {
            "formula": self.spec.formula,
            "outcome": self.spec.outcome,
            "family": self.spec.family,
            "references": {k: _jsonable(v) for k, v in self.spec.references.items()},
            "columns": self.all_labels,
            "keep": [bool(k) for k in self.keep],
            "factor_levels": {k: [_jsonable(v) for v in lv] for k, lv in self.factor_levels.items()},
            "numeric_means": {k: float(v) for k, v in self.numeric_means.items()},
            "time_points": [int(t) for t in self.time_points],
            "dropped": self.dropped,
        }

    @classmethod
    def from_dict(cls, d, factors=()):
        refs = {k: _unjson_level(k, v) for k, v in d.get("references", {}).items()}
        factor_names = set(factors) | set(d["factor_levels"])
        spec = ModelSpec.from_formula(d["formula"], d["outcome"], family=d["family"],
                                      references=refs, factors=factor_names)
        levels = {k: [_unjson_level(k, v) for v in lv] for k, lv in d["factor_levels"].items()}
        return cls(spec=spec, all_labels=list(d["columns"]), keep=np.array(d["keep"], dtype=bool),
                   factor_levels=levels, numeric_means=dict(d["numeric_means"]),
                   time_points=list(d["time_points"]), dropped=list(d["dropped"]))


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    random: list
    info: DesignInfo
    rows: np.ndarray
    frame: pd.DataFrame

    @property
    def labels(self):
        return self.info.labels


def _jsonable(v):
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _unjson_level(name, v):
    if name == "personalised" and isinstance(v, str):
        return v.lower() == "true"
    return v


def _level_key(v):
    if isinstance(v, (bool, np.bool_)):
        return f"b:{bool(v)}"
    if isinstance(v, (int, float, np.integer, np.floating)):
        return f"n:{float(v)!r}"
    return f"s:{v}"


def _level_label(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        return str(int(v))
    return str(v)


def _declared_order(name, observed):
    if name == "domain":
        return [d for d in DOMAINS if d in observed]
    if name == "personalised":
        return [b for b in (False, True) if b in observed]
    return sorted(observed, key=lambda v: (str(type(v)), v))


def _factor_names(spec):
    return [t.name for t in _walk(spec.fixed) if isinstance(t, Factor)]


def _term_columns(term, frame, factor_levels, refs):
    """Named columns contributed by one simple term."""
    if isinstance(term, Intercept):
        return ["(Intercept)"], [np.ones(len(frame))]
    if isinstance(term, PolyDose):
        x = _numeric(frame, term.var)
        names = [term.var if k == 1 else f"{term.var}^{k}" for k in range(1, term.order + 1)]
        return names, [x ** k for k in range(1, term.order + 1)]
    if isinstance(term, TimeLinear):
        return [term.var], [_numeric(frame, term.var)]
    if isinstance(term, Covariate):
        return [term.name], [_numeric(frame, term.name)]
    if isinstance(term, Factor):
        levels = factor_levels[term.name]
        ref = refs.get(term.name, term.reference)
        ref = levels[0] if ref is None or _level_key(ref) not in map(_level_key, levels) else ref
        vals = frame[term.name].map(_level_key).to_numpy()
        names, cols = [], []
        for lv in levels:
            if _level_key(lv) == _level_key(ref):
                continue
            names.append(f"{term.name}[{_level_label(lv)}]")
            cols.append((vals == _level_key(lv)).astype(float))
        return names, cols
    raise TypeError(term)


def _numeric(frame, name):
    if name not in frame.columns:
        raise UnknownVariable(f"variable {name!r} not in data")
    return frame[name].to_numpy(dtype=float)


def _fixed_columns(spec: ModelSpec, frame, factor_levels):
    refs = spec.references
    labels, cols = [], []
    for term in spec.fixed:
        if isinstance(term, Interaction):
            pieces = [_term_columns(t, frame, factor_levels, refs) for t in term.terms]
            for combo in product(*[list(zip(n, c)) for n, c in pieces]):
                labels.append(":".join(n for n, _ in combo))
                col = np.ones(len(frame))
                for _, c in combo:
                    col = col * c
                cols.append(col)
        else:
            n, c = _term_columns(term, frame, factor_levels, refs)
            labels.extend(n)
            cols.extend(c)
    return labels, cols


def _aliased(X: np.ndarray, tol=1e-9) -> np.ndarray:
    """Left-to-right greedy rank check: keep a column unless it is a linear
    combination of the columns kept before it."""
    p = X.shape[1]
    keep = np.zeros(p, dtype=bool)
    norms = np.sqrt((X ** 2).sum(axis=0))
    basis = np.zeros((X.shape[0], 0))
    for j in range(p):
        if norms[j] == 0:
            continue
        v = X[:, j] / norms[j]
        if basis.shape[1]:
            v = v - basis @ (basis.T @ v)
            v = v - basis @ (basis.T @ v)
        r = np.linalg.norm(v)
        if r > np.sqrt(tol):
            keep[j] = True
            basis = np.column_stack([basis, v / r])
    return keep


def _prepare_frame(spec: ModelSpec, table):
    if isinstance(table, ObservationTable):
        frame = table.model_frame(spec.outcome)
        declared = dict(table.covariate_levels)
    else:
        frame = table.reset_index(drop=True)
        declared = {}
    return frame, declared


def build_design(spec: ModelSpec, table) -> Design:
    """Realise ``spec`` on an :class:`ObservationTable` (or a model frame)."""
    frame, declared = _prepare_frame(spec, table)
    if spec.response not in frame.columns:
        raise UnknownVariable(f"response {spec.response!r} not in data")
    if len(frame) == 0:
        raise UnknownVariable(f"no rows for outcome {spec.outcome!r}")

    # promote non-numeric covariates to factors
    fixed = []
    for t in spec.fixed:
        fixed.append(_promote(t, frame, declared))
    spec = replace(spec, fixed=tuple(fixed))

    used = set()
    for t in _walk(spec.fixed):
        if not isinstance(t, Intercept):
            used.add(_base_name(t))
    for r in spec.random:
        used.add(r.grouping)
        if r.has_slope:
            used.add(TIME_VAR)
    used.add(spec.response)
    missing = sorted(u for u in used if u not in frame.columns)
    if missing:
        raise UnknownVariable(f"variable(s) {missing} not in data")

    complete = np.ones(len(frame), dtype=bool)
    for u in used:
        complete &= frame[u].notna().to_numpy()
    rows = np.flatnonzero(complete)
    frame = frame.iloc[rows].reset_index(drop=True)

    factor_levels = {}
    for name in _factor_names(spec):
        observed = set(frame[name].tolist())
        levels = declared.get(name)
        if levels is not None:
            levels = [lv for lv in levels if lv in observed]
        else:
            levels = _declared_order(name, observed)
        if len(levels) < 2:
            raise EmptyFactorLevel(f"factor {name!r} has fewer than two observed levels")
        ref = spec.references.get(name)
        if ref is not None and _level_key(ref) not in map(_level_key, levels):
            raise EmptyFactorLevel(f"reference level {ref!r} of {name!r} not observed")
        factor_levels[name] = levels

    labels, cols = _fixed_columns(spec, frame, factor_levels)
    if not cols:
        raise RankDeficient("model has no fixed-effect columns")
    X = np.column_stack(cols)
    keep = _aliased(X)
    dropped = [lab for lab, k in zip(labels, keep) if not k]

    numeric_means = {}
    for t in _walk(spec.fixed):
        if isinstance(t, Covariate):
            numeric_means[t.name] = float(np.mean(frame[t.name].to_numpy(dtype=float)))
    times = sorted(int(v) for v in frame[TIME_VAR].unique()) if TIME_VAR in frame.columns else []

    random = [_random_block(r, frame) for r in spec.random]

    info = DesignInfo(spec=spec, all_labels=labels, keep=keep, factor_levels=factor_levels,
                      numeric_means=numeric_means, time_points=times, dropped=dropped)
    y = frame[spec.response].to_numpy(dtype=float)
    return Design(X=X[:, keep], y=y, random=random, info=info, rows=rows, frame=frame)


def _promote(term, frame, declared):
    if isinstance(term, Covariate):
        if term.name in declared or (term.name in frame.columns and
                                     not pd.api.types.is_numeric_dtype(frame[term.name])):
            return Factor(term.name)
        return term
    if isinstance(term, Interaction):
        return Interaction(tuple(_promote(t, frame, declared) for t in term.terms))
    return term


def _random_block(r: RandomSpec, frame) -> RandomBlock:
    groups = frame[r.grouping].astype(str).to_numpy()
    levels, codes = np.unique(groups, return_inverse=True)
    cols = []
    for t in r.terms:
        cols.append(np.ones(len(frame)) if t == "Intercept" else _numeric(frame, TIME_VAR))
    return RandomBlock(spec=r, levels=list(levels), codes=codes.astype(np.int64),
                       Z=np.column_stack(cols))


def dense_z(blocks) -> np.ndarray:
    """Full n x q random-effects matrix, level-major within each grouping."""
    mats = []
    for b in blocks:
        n = len(b.codes)
        Zb = np.zeros((n, b.n_levels * b.q))
        for j in range(b.q):
            Zb[np.arange(n), b.codes * b.q + j] = b.Z[:, j]
        mats.append(Zb)
    return np.hstack(mats) if mats else np.zeros((0, 0))


def default_levels(name):
    if name == DOSE_VAR:
        return list(LAMBDA_LEVELS)
    if name == "domain":
        return list(DOMAINS)
    if name == "personalised":
        return [False, True]
    raise KeyError(name)
