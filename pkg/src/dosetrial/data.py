"""Long-format trial observations, treatment metadata and CSV ingestion."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    DataError,
    DuplicateKey,
    MissingColumn,
    MixedScales,
    UnknownTreatmentLevel,
    UnknownVariable,
    ValueOutOfRange,
)

LAMBDA_LEVELS = (-1.0, -0.5, 0.0, 0.5, 1.0)
DOMAINS = ("Political", "Emotional")
OBS_COLUMNS = ["participant_id", "time", "outcome", "item", "value", "baseline"]
KEY = ["participant_id", "outcome", "item", "time"]
ASSIGNMENT_COLUMNS = ["lambda", "domain", "personalised"]


@dataclass(frozen=True)
class TreatmentAssignment:
    lam: float
    domain: str
    personalised: bool

    def __post_init__(self):
        if not _is_lambda_level(self.lam):
            raise UnknownTreatmentLevel(f"lambda={self.lam} is not a design level")
        if self.domain not in DOMAINS:
            raise UnknownTreatmentLevel(f"domain={self.domain!r}")


@dataclass(frozen=True)
class OutcomeInfo:
    """Registry entry: value scale, time unit and outcome type."""

    name: str
    kind: str = "continuous"
    scale: tuple[float, float] | None = (0.0, 100.0)
    time_unit: str = "session"

    def __post_init__(self):
        if self.kind not in ("continuous", "binary"):
            raise DataError(f"outcome {self.name}: unknown type {self.kind!r}")
        if self.scale is not None:
            object.__setattr__(self, "scale", (float(self.scale[0]), float(self.scale[1])))

    def violations(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        bad = ~np.isfinite(values)
        if self.kind == "binary":
            return bad | ~np.isin(values, (0.0, 1.0))
        if self.scale is not None:
            lo, hi = self.scale
            bad |= (values < lo) | (values > hi)
        return bad

    def scale_key(self):
        return (self.kind, self.scale, self.time_unit)

    def to_dict(self):
        return {"type": self.kind, "scale": list(self.scale) if self.scale else None,
                "time_unit": self.time_unit}

    @classmethod
    def from_dict(cls, name, d):
        scale = d.get("scale", (0.0, 100.0))
        return cls(name=name, kind=d.get("type", "continuous"),
                   scale=None if scale is None else tuple(scale),
                   time_unit=d.get("time_unit", "session"))


def companionship_indicator(assignment: TreatmentAssignment) -> int:
    """1 for positive relationship-seeking in the emotional domain, else 0."""
    return int(assignment.lam > 0 and assignment.domain == "Emotional")


def _is_lambda_level(x) -> bool:
    try:
        x = float(x)
    except (TypeError, ValueError):
        return False
    return any(x == lv for lv in LAMBDA_LEVELS)


def _parse_bool(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    s = str(v).strip().lower()
    if s in ("true", "1", "yes", "1.0"):
        return True
    if s in ("false", "0", "no", "0.0"):
        return False
    raise ValueError(v)


def _normalise_domain(v):
    s = str(v).strip().capitalize()
    if s not in DOMAINS:
        raise ValueError(v)
    return s


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """Validated long-format table; one row per participant x outcome x item x time.

    ``assignments`` may be ``None`` for non-trial panels (e.g. model x prompt
    scores) where there is no treatment arm.
    """

    observations: pd.DataFrame
    assignments: pd.DataFrame | None
    registry: dict[str, OutcomeInfo]
    covariates: pd.DataFrame | None = None
    covariate_levels: dict[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        obs = _coerce_observations(self.observations)
        object.__setattr__(self, "observations", obs)
        if self.assignments is not None:
            object.__setattr__(self, "assignments", _coerce_assignments(self.assignments))
        if self.covariates is not None:
            cov = self.covariates.copy()
            cov.index = cov.index.astype(str)
            cov.index.name = "participant_id"
            object.__setattr__(self, "covariates", cov)
        _validate_table(self)

    # -- access -----------------------------------------------------------------
    def __len__(self):
        return len(self.observations)

    @property
    def outcomes(self) -> list[str]:
        return sorted(self.observations["outcome"].unique())

    @property
    def participants(self) -> list[str]:
        if self.assignments is not None:
            return list(self.assignments.index)
        return sorted(self.observations["participant_id"].unique())

    def assignment(self, pid) -> TreatmentAssignment:
        row = self.assignments.loc[str(pid)]
        return TreatmentAssignment(float(row["lambda"]), row["domain"], bool(row["personalised"]))

    def select(self, outcomes) -> "ObservationTable":
        if isinstance(outcomes, str):
            outcomes = [outcomes]
        missing = set(outcomes) - set(self.registry)
        if missing:
            raise UnknownVariable(f"unknown outcome(s): {sorted(missing)}")
        mask = self.observations["outcome"].isin(outcomes).to_numpy()
        obs = self.observations[mask].reset_index(drop=True)
        lines = self.observations.attrs.get("lines")
        obs.attrs = {} if lines is None else {"lines": tuple(np.asarray(lines)[mask].tolist())}
        reg = {k: v for k, v in self.registry.items() if k in outcomes}
        return replace(self, observations=obs, registry=reg)

    def model_frame(self, outcome: str | None = None) -> pd.DataFrame:
        """Observation rows joined with treatment arms and covariates.

        Row order follows the table. ``participant_id`` is exposed as
        ``participant`` for use in formulas.
        """
        obs = self.observations
        if outcome is not None:
            if outcome not in self.registry:
                raise UnknownVariable(f"unknown outcome {outcome!r}")
            obs = obs[obs["outcome"] == outcome]
        frame = obs.rename(columns={"participant_id": "participant"}).reset_index(drop=True)
        if self.assignments is not None:
            arms = self.assignments.reindex(frame["participant"].to_numpy())
            frame["lambda"] = arms["lambda"].to_numpy()
            frame["domain"] = arms["domain"].to_numpy()
            frame["personalised"] = arms["personalised"].to_numpy()
            frame["companionship"] = ((frame["lambda"] > 0)
                                      & (frame["domain"] == "Emotional")).astype(int)
        if self.covariates is not None:
            cov = self.covariates.reindex(frame["participant"].to_numpy())
            for col in cov.columns:
                if col not in frame.columns:
                    frame[col] = cov[col].to_numpy()
        return frame

    # -- comparison / export ----------------------------------------------------
    def canonical(self):
        obs = self.observations.sort_values(KEY, na_position="first").reset_index(drop=True)
        arms = None if self.assignments is None else self.assignments.sort_index()
        cov = None if self.covariates is None else self.covariates.sort_index()
        return obs, arms, cov

    def __eq__(self, other):
        if not isinstance(other, ObservationTable):
            return NotImplemented
        if self.registry != other.registry:
            return False
        for a, b in zip(self.canonical(), other.canonical()):
            if (a is None) != (b is None):
                return False
            if a is not None and not _frames_equal(a, b):
                return False
        return True

    __hash__ = None

    def write_csv(self, directory) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"observations": directory / "observations.csv"}
        self.observations.to_csv(paths["observations"], index=False)
        if self.assignments is not None:
            paths["assignments"] = directory / "assignments.csv"
            arms = self.assignments.reset_index()
            arms["personalised"] = arms["personalised"].map({True: "true", False: "false"})
            arms.to_csv(paths["assignments"], index=False)
        if self.covariates is not None:
            paths["covariates"] = directory / "covariates.csv"
            self.covariates.reset_index().to_csv(paths["covariates"], index=False)
        return paths


def _frames_equal(a: pd.DataFrame, b: pd.DataFrame) -> bool:
    if list(a.columns) != list(b.columns) or len(a) != len(b):
        return False
    if not a.index.astype(str).equals(b.index.astype(str)):
        return False
    for col in a.columns:
        x, y = a[col], b[col]
        if pd.api.types.is_float_dtype(x) or pd.api.types.is_float_dtype(y):
            xv = x.to_numpy(dtype=float)
            yv = y.to_numpy(dtype=float)
            if not np.array_equal(xv, yv, equal_nan=True):
                return False
        elif not x.reset_index(drop=True).fillna("").astype(str).equals(
                y.reset_index(drop=True).fillna("").astype(str)):
            return False
    return True


def _coerce_observations(obs: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in ("participant_id", "time", "outcome", "value") if c not in obs.columns]
    if missing:
        raise MissingColumn(f"observations missing column(s): {missing}")
    out = pd.DataFrame({
        "participant_id": obs["participant_id"].astype(str).to_numpy(),
        "time": obs["time"].to_numpy(),
        "outcome": obs["outcome"].astype(str).to_numpy(),
        "item": obs["item"].to_numpy(dtype=object) if "item" in obs else None,
        "value": obs["value"].to_numpy(dtype=float),
        "baseline": obs["baseline"].to_numpy(dtype=float) if "baseline" in obs else np.nan,
    })
    item = out["item"].astype(object)
    item = item.where(item.notna() & (item.astype(str) != ""), None)
    out["item"] = item.map(lambda v: None if v is None else str(v)).astype(object)
    time = pd.to_numeric(out["time"], errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(time) | (time < 0) | (time != np.round(time))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueOutOfRange(f"time must be a non-negative integer, got {obs['time'].iloc[i]!r}",
                              line=_line_of(obs, i))
    out["time"] = time.astype(np.int64)
    lines = obs["_line"].to_numpy() if "_line" in obs.columns else obs.attrs.get("lines")
    if lines is not None and len(lines) == len(out):
        # a tuple so that pandas can compare attrs when concatenating
        out.attrs["lines"] = tuple(int(v) for v in lines)
    return out


def _coerce_assignments(arms: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in ASSIGNMENT_COLUMNS if c not in arms.columns]
    if missing:
        raise MissingColumn(f"assignments missing column(s): {missing}")
    out = pd.DataFrame(index=pd.Index(arms.index.astype(str), name="participant_id"))
    lam = pd.to_numeric(arms["lambda"], errors="coerce").to_numpy(dtype=float)
    for i, v in enumerate(lam):
        if not _is_lambda_level(v):
            raise UnknownTreatmentLevel(f"lambda={arms['lambda'].iloc[i]!r} is not a design level",
                                        line=_line_of(arms, i))
    out["lambda"] = lam
    domains, pers = [], []
    for i, (d, p) in enumerate(zip(arms["domain"], arms["personalised"])):
        try:
            domains.append(_normalise_domain(d))
        except ValueError:
            raise UnknownTreatmentLevel(f"domain={d!r}", line=_line_of(arms, i)) from None
        try:
            pers.append(_parse_bool(p))
        except ValueError:
            raise UnknownTreatmentLevel(f"personalised={p!r}", line=_line_of(arms, i)) from None
    out["domain"] = domains
    out["personalised"] = np.array(pers, dtype=bool)
    if out.index.duplicated().any():
        pid = out.index[out.index.duplicated()][0]
        raise DuplicateKey(f"participant {pid} has more than one assignment")
    return out


def _line_of(frame, i):
    if "_line" in frame.columns:
        return int(frame["_line"].iloc[i])
    return None


def _validate_table(table: ObservationTable):
    obs = table.observations
    unknown = sorted(set(obs["outcome"]) - set(table.registry))
    if unknown:
        i = int(np.flatnonzero(obs["outcome"].isin(unknown).to_numpy())[0])
        raise UnknownVariable(f"outcome {unknown[0]!r} not in registry", line=_obs_line(table, i))
    for name, info in table.registry.items():
        mask = (obs["outcome"] == name).to_numpy()
        if not mask.any():
            continue
        bad = info.violations(obs["value"].to_numpy()[mask])
        if bad.any():
            i = int(np.flatnonzero(mask)[np.flatnonzero(bad)[0]])
            raise ValueOutOfRange(f"{name} value {obs['value'].iloc[i]} outside declared scale",
                                  line=_obs_line(table, i))
    dup = obs.duplicated(KEY, keep="first").to_numpy()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise DuplicateKey(f"duplicate key {tuple(obs.iloc[i][KEY])}", line=_obs_line(table, i))
    if table.assignments is not None:
        orphan = ~obs["participant_id"].isin(table.assignments.index).to_numpy()
        if orphan.any():
            i = int(np.flatnonzero(orphan)[0])
            raise DataError(f"participant {obs['participant_id'].iloc[i]} has no assignment",
                            line=_obs_line(table, i))
    if table.covariates is not None:
        universe = table.assignments.index if table.assignments is not None \
            else pd.Index(obs["participant_id"].unique())
        stray = ~table.covariates.index.isin(universe)
        if stray.any():
            raise DataError(f"orphan covariate record for {table.covariates.index[stray][0]}")
        if table.covariates.index.duplicated().any():
            raise DuplicateKey("more than one covariate record for a participant")
        for col, levels in table.covariate_levels.items():
            if col not in table.covariates.columns:
                raise MissingColumn(f"covariate {col} declared but absent")
            vals = table.covariates[col].dropna().astype(str)
            bad = ~vals.isin([str(lv) for lv in levels])
            if bad.any():
                raise ValueOutOfRange(f"covariate {col}={vals[bad].iloc[0]!r} not in {levels}")


def _obs_line(table, i):
    lines = table.observations.attrs.get("lines")
    if lines is None or len(lines) != len(table.observations):
        return None
    return int(lines[i])


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def _read(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    frame["_line"] = np.arange(2, len(frame) + 2)
    return frame


def _to_float(frame, col):
    raw = frame[col].where(frame[col] != "")
    vals = pd.to_numeric(raw, errors="coerce")
    bad = vals.isna() & raw.notna()
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise ValueOutOfRange(f"{col}={frame[col].iloc[i]!r} is not numeric", line=_line_of(frame, i))
    return raw.map(lambda s: np.nan if pd.isna(s) else float(s)).to_numpy(dtype=float)


def ingest_csv(path, schema: dict[str, OutcomeInfo], assignments=None, covariates=None,
               covariate_levels=None) -> ObservationTable:
    """Read and validate a long-format observation CSV.

    Treatment arms come either from a separate ``assignments`` CSV
    (participant_id, lambda, domain, personalised) or from the same columns
    inlined in the observation file, in which case they must be constant
    within each participant. Errors carry the offending line number.
    """
    raw = _read(path)
    missing = [c for c in ("participant_id", "time", "outcome", "value") if c not in raw.columns]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {missing}")
    obs = pd.DataFrame({
        "participant_id": raw["participant_id"],
        "time": raw["time"],
        "outcome": raw["outcome"],
        "item": raw["item"].where(raw["item"] != "", None) if "item" in raw else None,
        "value": _to_float(raw, "value"),
        "baseline": _to_float(raw, "baseline") if "baseline" in raw else np.nan,
        "_line": raw["_line"],
    })

    if assignments is not None:
        arms = _read(assignments)
        missing = [c for c in ["participant_id"] + ASSIGNMENT_COLUMNS if c not in arms.columns]
        if missing:
            raise MissingColumn(f"{assignments}: missing column(s) {missing}")
        arms = arms.set_index("participant_id")
    elif all(c in raw.columns for c in ASSIGNMENT_COLUMNS):
        inline = raw[["participant_id"] + ASSIGNMENT_COLUMNS + ["_line"]]
        for i, v in enumerate(inline["lambda"]):
            if not _is_lambda_level(v):
                raise UnknownTreatmentLevel(f"lambda={v!r} is not a design level",
                                            line=int(inline["_line"].iloc[i]))
        firsts = inline.drop_duplicates("participant_id")
        merged = inline.merge(firsts, on="participant_id", suffixes=("", "_first"))
        for col in ASSIGNMENT_COLUMNS:
            diff = merged[col] != merged[col + "_first"]
            if diff.any():
                line = int(merged["_line"][diff].iloc[0])
                raise DataError(f"assignment column {col} varies within participant", line=line)
        arms = firsts.set_index("participant_id")
    else:
        raise MissingColumn("no treatment assignments: supply an assignments CSV "
                            "or inline lambda,domain,personalised columns")

    cov = None
    if covariates is not None:
        cov_raw = _read(covariates)
        if "participant_id" not in cov_raw.columns:
            raise MissingColumn(f"{covariates}: missing participant_id")
        cov = cov_raw.drop(columns="_line").set_index("participant_id")
        levels = covariate_levels or {}
        for col in cov.columns:
            if col in levels:
                cov[col] = cov[col].where(cov[col] != "", None)
            else:
                cov[col] = pd.to_numeric(cov[col].where(cov[col] != ""), errors="coerce")

    arms_checked = _coerce_assignments(arms)
    lines = obs.pop("_line").to_numpy()
    obs_c = _coerce_observations(obs.assign(_line=lines))
    obs_c.attrs["lines"] = lines
    return ObservationTable(obs_c, arms_checked, dict(schema), cov, dict(covariate_levels or {}))


def read_table(directory, schema, covariate_levels=None) -> ObservationTable:
    """Ingest the files written by :meth:`ObservationTable.write_csv`."""
    directory = Path(directory)
    cov = directory / "covariates.csv"
    return ingest_csv(directory / "observations.csv", schema,
                      assignments=directory / "assignments.csv",
                      covariates=cov if cov.exists() else None,
                      covariate_levels=covariate_levels)


# ---------------------------------------------------------------------------
# derived views
# ---------------------------------------------------------------------------

def pool_items(table: ObservationTable, construct: str, items: list[str]) -> ObservationTable:
    """Relabel rows of several same-scale outcomes as one construct.

    The original outcome name is kept in ``item`` so that a joint model can
    include it as a factor. Values are never altered.
    """
    missing = [i for i in items if i not in table.registry]
    if missing:
        raise UnknownVariable(f"unknown item outcome(s) {missing}")
    keys = {table.registry[i].scale_key() for i in items}
    if len(keys) > 1:
        raise MixedScales(f"items {items} do not share scale/time unit: {sorted(map(str, keys))}")
    obs = table.observations.copy()
    mask = obs["outcome"].isin(items).to_numpy()
    sub_item = obs.loc[mask, "item"].to_numpy(dtype=object)
    new_item = obs.loc[mask, "outcome"].astype(str).to_numpy(dtype=object)
    has_sub = pd.notna(sub_item)
    new_item[has_sub] = [f"{a}/{b}" for a, b in zip(new_item[has_sub], sub_item[has_sub])]
    obs.loc[mask, "item"] = new_item
    obs.loc[mask, "outcome"] = construct
    proto = table.registry[items[0]]
    registry = {k: v for k, v in table.registry.items() if k not in items}
    registry[construct] = replace(proto, name=construct)
    obs.attrs = {}
    return replace(table, observations=obs, registry=registry)


def attrition_table(table_pre: ObservationTable, table_post: ObservationTable,
                    arm: str) -> pd.DataFrame:
    """Completer / non-completer counts per level of a treatment factor.

    Completion means the participant has at least one row in ``table_post``.
    """
    if table_pre.assignments is None:
        raise DataError("attrition needs treatment assignments")
    arms = table_pre.assignments.copy()
    arms["companionship"] = ((arms["lambda"] > 0) & (arms["domain"] == "Emotional")).astype(int)
    if arm not in arms.columns:
        raise UnknownVariable(f"unknown arm {arm!r}")
    completed = arms.index.isin(table_post.observations["participant_id"].unique())
    if arm == "lambda":
        levels = list(LAMBDA_LEVELS)
    elif arm == "domain":
        levels = list(DOMAINS)
    else:
        levels = sorted(arms[arm].unique().tolist())
    counts = pd.DataFrame(0, index=["completed", "not_completed"], columns=levels, dtype=np.int64)
    for lv in levels:
        in_arm = (arms[arm] == lv).to_numpy()
        counts.loc["completed", lv] = int((in_arm & completed).sum())
        counts.loc["not_completed", lv] = int((in_arm & ~completed).sum())
    counts.columns.name = arm
    return counts
