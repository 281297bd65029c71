"""Analysis configuration: dataclasses, YAML loading and validation.

Every key is documented through field metadata so that ``--print-schema``
can list them. Validation runs before any computation.
"""
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import OutcomeInfo
from .design import ModelSpec
from .errors import ConfigError, DataError
from .multiplicity import TIERS


SELECTOR_COLUMNS = ("lambda", "domain", "personalised", "companionship")


def _doc(text, **kw):
    return field(metadata={"doc": text}, **kw)


@dataclass
class DataConfig:
    source: str = _doc("'simulate' (built-in synthetic study) or 'files'", default="simulate")
    observations: str | None = _doc("long-format observation CSV (source: files)", default=None)
    assignments: str | None = _doc("assignments CSV (participant_id,lambda,domain,personalised)",
                                   default=None)
    covariates: str | None = _doc("optional participant covariates CSV", default=None)
    n_participants: int = _doc("simulated participants", default=300)
    n_sessions: int = _doc("simulated daily sessions", default=20)
    n_weeks: int = _doc("simulated weeks", default=4)
    dropout_prob: float = _doc("probability a simulated participant drops out", default=0.05)
    missing_prob: float = _doc("per-session missingness probability", default=0.03)


@dataclass
class ContrastConfig:
    name: str = _doc("contrast name, used in test ids '<model>:<name>'")
    factor: str = _doc("variable whose levels are split", default="lambda")
    split: list = _doc("two disjoint lists of levels: [A, B] gives mean(A) - mean(B)",
                       default_factory=lambda: [[0.5, 1.0], [-0.5, -1.0]])


@dataclass
class SlopeConfig:
    name: str = _doc("slope name, used in test ids '<model>:slope:<name>'")
    levels: dict = _doc("grid levels pooled for this slope, e.g. {lambda: [0.5, 1.0]}",
                        default_factory=dict)


@dataclass
class ModelConfig:
    name: str = _doc("model name (also the output subdirectory)")
    outcome: str = _doc("outcome (or pooled construct) to model")
    formula: str = _doc("formula, e.g. 'value ~ poly(lambda,3) + time + (1 + time | participant)'")
    family: str = _doc("'gaussian' or 'binomial'", default="gaussian")
    select_order: bool = _doc("compare poly(lambda, k) orders by AIC under ML", default=True)
    orders: list = _doc("candidate polynomial orders", default_factory=lambda: [1, 2, 3])
    criterion: str = _doc("criterion for the reported mixed-model fit", default="REML")
    time: int | None = _doc("evaluate EMMs at this time point instead of averaging", default=None)
    contrasts: list[ContrastConfig] = _doc("paired contrasts of marginal means",
                                           default_factory=list)
    slopes: list[SlopeConfig] = _doc("pooled per-condition time slopes", default_factory=list)


@dataclass
class FamilyConfig:
    id: str = _doc("family id")
    tier: str = _doc("Primary, Robustness or Descriptive")
    tests: list = _doc("member test ids")
    groups: dict = _doc("test id -> group name (non-primary tiers)", default_factory=dict)
    note: str = _doc("free text, e.g. whether membership is assumed", default="")


@dataclass
class ArmTestConfig:
    name: str = _doc("test name, used in test id 'trajectory:<name>'")
    exposed: dict = _doc("selector over arm columns, e.g. {lambda: [0.5, 1.0]}")
    control: dict | None = _doc("selector for the control group (default: everyone else)",
                                default=None)
    profile: str = _doc("profile counted (proportion tests only)", default="DecoupledDependency")
    direction: str = _doc("'greater' or 'less'", default="greater")


@dataclass
class TrajectoryConfig:
    enabled: bool = _doc("run the liking/wanting profile analysis", default=True)
    liking_model: str | None = _doc("model providing liking slopes", default=None)
    wanting_model: str | None = _doc("model providing wanting slopes", default=None)
    tie: str = _doc("zero-slope rule: 'strict' or 'nonincreasing'", default="strict")
    proportion_tests: list[ArmTestConfig] = _doc("one-sided profile proportion tests",
                                                 default_factory=list)
    decoupling_tests: list[ArmTestConfig] = _doc("Welch tests on decoupling scores",
                                                 default_factory=list)


@dataclass
class PsychometricsConfig:
    enabled: bool = _doc("run polychoric EFA and preference clustering", default=True)
    outcome: str = _doc("ordinal item outcome", default="psychosocial")
    n_factors: int = _doc("factors extracted", default=2)
    pre_time: int = _doc("time index of the pre measurement", default=0)
    post_time: int = _doc("time index of the post measurement", default=1)
    shift_exposed: dict = _doc("selector for the factor-shift test",
                               default_factory=lambda: {"companionship": [1]})
    preferences: str | None = _doc("preference item outcome to cluster", default="preferences")
    n_clusters: int = _doc("k for the reported clustering", default=2)
    silhouette_k: list = _doc("k values for silhouette diagnostics",
                              default_factory=lambda: [2, 3, 4, 5, 6])


@dataclass
class AttritionConfig:
    enabled: bool = _doc("Fisher tests of differential attrition", default=True)
    completion_outcome: str | None = _doc("outcome whose presence marks completion",
                                          default=None)
    arms: list = _doc("arm factors tested", default_factory=lambda: ["lambda", "domain",
                                                                      "personalised"])


@dataclass
class AnalysisConfig:
    output_dir: str = _doc("artifact directory (relative to the working directory)")
    seed: int = _doc("master seed", default=0)
    data: DataConfig = _doc("data source", default_factory=DataConfig)
    outcomes: dict = _doc("outcome registry: name -> {type, scale, time_unit}",
                          default_factory=dict)
    pools: dict = _doc("pooled constructs: name -> list of outcomes", default_factory=dict)
    grid_weights: str = _doc("'equal' or 'observed' weights over arm factors", default="equal")
    models: list[ModelConfig] = _doc("models fitted per outcome", default_factory=list)
    families: list[FamilyConfig] = _doc("hypothesis families for FDR", default_factory=list)
    trajectory: TrajectoryConfig = _doc("profile analysis", default_factory=TrajectoryConfig)
    psychometrics: PsychometricsConfig = _doc("factor analysis and clustering",
                                              default_factory=PsychometricsConfig)
    attrition: AttritionConfig = _doc("attrition checks", default_factory=AttritionConfig)
    plots: bool = _doc("emit SVG dose-response plots", default=True)
    bootstrap: int = _doc("bootstrap replicates where used", default=1000)

    # filled by load_config
    path: Path | None = field(default=None, repr=False, metadata={"internal": True})
    sha256: str = field(default="", repr=False, metadata={"internal": True})

    def resolve(self, p) -> Path:
        p = Path(p)
        if p.is_absolute() or self.path is None:
            return p
        return self.path.parent / p

    @property
    def registry(self) -> dict[str, OutcomeInfo]:
        return {k: OutcomeInfo.from_dict(k, v or {}) for k, v in self.outcomes.items()}

    def model(self, name) -> ModelConfig:
        for m in self.models:
            if m.name == name:
                return m
        raise KeyError(name)

    def spec(self, m: ModelConfig) -> ModelSpec:
        return ModelSpec.from_formula(m.formula, m.outcome, family=m.family)


# ---------------------------------------------------------------------------
# construction from plain dicts
# ---------------------------------------------------------------------------

def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kw = {}
    for name, value in raw.items():
        kw[name] = _coerce(hints[name], value, f"{where}.{name}")
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def _coerce(tp, value, where):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value if value is not None else {}, where)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is list and args and dataclasses.is_dataclass(args[0]):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    return value


def parse_config(raw: dict, path=None) -> AnalysisConfig:
    cfg = _build(AnalysisConfig, raw, "config")
    if path is not None:
        cfg.path = Path(path).resolve()
    validate(cfg)
    return cfg


def load_config(path) -> AnalysisConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    text = path.read_bytes()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    cfg = parse_config(raw or {}, path)
    cfg.sha256 = hashlib.sha256(text).hexdigest()
    return cfg


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def expected_tests(cfg: AnalysisConfig, lambda_levels=(-1.0, -0.5, 0.0, 0.5, 1.0)) -> list[str]:
    """Every test id the pipeline can produce under this config."""
    ids = []
    for m in cfg.models:
        ids += [f"{m.name}:{c.name}" for c in m.contrasts]
        ids += [f"{m.name}:slope:{s.name}" for s in m.slopes]
    if cfg.trajectory.enabled:
        ids += [f"trajectory:{t.name}" for t in cfg.trajectory.proportion_tests]
        ids += [f"trajectory:{t.name}" for t in cfg.trajectory.decoupling_tests]
    if cfg.psychometrics.enabled:
        ids += [f"psychometrics:shift:F{j + 1}" for j in range(cfg.psychometrics.n_factors)]
    if cfg.attrition.enabled:
        for arm in cfg.attrition.arms:
            if arm == "lambda":
                ids += [f"attrition:lambda={lv:g}" for lv in lambda_levels]
            else:
                ids.append(f"attrition:{arm}")
    return ids


def _problems(cfg: AnalysisConfig):
    out = []
    if cfg.data.source not in ("simulate", "files"):
        out.append(f"data.source must be 'simulate' or 'files', got {cfg.data.source!r}")
    if cfg.data.source == "files":
        for key in ("observations", "assignments"):
            p = getattr(cfg.data, key)
            if p is None:
                out.append(f"data.{key} is required when data.source is 'files'")
            elif not cfg.resolve(p).exists():
                out.append(f"data.{key}: file {p} not found")
    if cfg.grid_weights not in ("equal", "observed"):
        out.append(f"grid_weights must be 'equal' or 'observed', got {cfg.grid_weights!r}")
    try:
        registry = cfg.registry
    except (DataError, TypeError, ValueError) as e:
        out.append(f"outcomes: {e}")
        registry = {}
    known = set(registry)
    for construct, items in cfg.pools.items():
        missing = [i for i in items if i not in registry]
        if missing:
            out.append(f"pool {construct}: unknown outcome(s) {missing}")
        known.add(construct)
    names = [m.name for m in cfg.models]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        out.append(f"duplicate model name(s) {dupes}")
    specs = {}
    for m in cfg.models:
        if m.outcome not in known:
            out.append(f"model {m.name}: unknown outcome {m.outcome!r}")
        if m.criterion.upper() not in ("REML", "ML"):
            out.append(f"model {m.name}: criterion must be REML or ML")
        try:
            specs[m.name] = cfg.spec(m)
        except ConfigError as e:
            out.append(f"model {m.name}: {e}")
            continue
        if m.select_order:
            if specs[m.name].poly_order is None:
                out.append(f"model {m.name}: select_order needs a poly(lambda, k) term")
            if not m.orders or any(int(k) not in (1, 2, 3) for k in m.orders):
                out.append(f"model {m.name}: orders must be drawn from 1, 2, 3")
        for c in m.contrasts:
            if len(c.split) != 2 or set(map(str, c.split[0])) & set(map(str, c.split[1])):
                out.append(f"model {m.name} contrast {c.name}: split must be two disjoint lists")
    tr = cfg.trajectory
    if tr.enabled:
        for role in ("liking_model", "wanting_model"):
            name = getattr(tr, role)
            if name is None:
                out.append(f"trajectory.{role} is required when trajectory is enabled")
            elif name not in specs:
                out.append(f"trajectory.{role}: unknown model {name!r}")
            elif not any(r.has_slope for r in specs[name].random):
                out.append(f"trajectory.{role}: model {name} has no random time slope")
        if tr.tie not in ("strict", "nonincreasing"):
            out.append("trajectory.tie must be 'strict' or 'nonincreasing'")
        for t in tr.proportion_tests + tr.decoupling_tests:
            for sel in (t.exposed, t.control or {}):
                bad = set(sel) - set(SELECTOR_COLUMNS)
                if bad:
                    out.append(f"trajectory test {t.name}: unknown selector column(s) "
                               f"{sorted(bad)}")
            if t.direction not in ("greater", "less"):
                out.append(f"trajectory test {t.name}: direction must be 'greater' or 'less'")
    ps = cfg.psychometrics
    if ps.enabled:
        bad = set(ps.shift_exposed) - set(SELECTOR_COLUMNS)
        if bad:
            out.append(f"psychometrics.shift_exposed: unknown selector column(s) {sorted(bad)}")
        if ps.outcome not in registry:
            out.append(f"psychometrics.outcome: unknown outcome {ps.outcome!r}")
        if ps.preferences is not None and ps.preferences not in registry:
            out.append(f"psychometrics.preferences: unknown outcome {ps.preferences!r}")
    at = cfg.attrition
    if at.enabled and at.completion_outcome is not None and at.completion_outcome not in registry:
        out.append(f"attrition.completion_outcome: unknown outcome {at.completion_outcome!r}")
    produced = set(expected_tests(cfg))
    seen = {}
    for fam in cfg.families:
        if fam.tier not in TIERS:
            out.append(f"family {fam.id}: unknown tier {fam.tier!r}")
        for t in fam.tests:
            if t not in produced:
                out.append(f"family {fam.id}: test {t!r} is not produced by any analysis")
            if t in seen:
                out.append(f"test {t!r} is in families {seen[t]} and {fam.id}")
            seen[t] = fam.id
    return out


def validate(cfg: AnalysisConfig):
    problems = _problems(cfg)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))


def schema_text() -> str:
    """Plain-text listing of every config key with its default."""
    lines = []

    def walk(cls, indent):
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if f.metadata.get("internal"):
                continue
            tp = hints[f.name]
            args = typing.get_args(tp)
            if f.default is not dataclasses.MISSING:
                default = f" (default: {f.default!r})"
            elif f.default_factory is not dataclasses.MISSING and not dataclasses.is_dataclass(tp):
                default = f" (default: {f.default_factory()!r})"
            else:
                default = " (required)" if f.default_factory is dataclasses.MISSING else ""
            lines.append(f"{'  ' * indent}{f.name}: {f.metadata.get('doc', '')}{default}")
            if dataclasses.is_dataclass(tp):
                walk(tp, indent + 1)
            elif args and dataclasses.is_dataclass(args[0]):
                lines.append(f"{'  ' * (indent + 1)}- list items:")
                walk(args[0], indent + 2)

    walk(AnalysisConfig, 0)
    return "\n".join(lines) + "\n"
