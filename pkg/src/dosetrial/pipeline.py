"""Pipeline stages over a shared artifact directory.

Layout under the output directory::

    data/           simulated CSVs (simulate)
    models/<name>/  comparison, fitted model JSON, coefficients, subject slopes
    contrasts/<name>/  EMMs and contrast/slope tests
    trajectory/     profile table and proportion/decoupling tests
    psychometrics/  loadings, factor scores, clusters
    plots/          one SVG per model
    report/         FDR-annotated results
    manifest.json

Each stage writes its subdirectory into a temporary sibling and renames it
into place, so a failed stage leaves no partial output behind.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import shutil
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from . import __version__
from .config import AnalysisConfig, ModelConfig
from .contrasts import ReferenceGrid, condition_slopes, emm, paired_contrast
from .data import ObservationTable, attrition_table, ingest_csv, pool_items, read_table
from .design import DesignInfo
from .errors import MissingResults, NoRandomSlope
from .fixed import fisher_exact
from .mixed import compare_fixed_specs, extract_subject_slopes, fit_any
from .multiplicity import HypothesisFamily, apply_hierarchy, to_frame
from .psychometrics import (efa_uls, kmeans, polychoric_matrix, score_anchored,
                            silhouette_diagnostics, standardise)
from .simulate import default_study, simulate_study
from .trajectory import classify_profiles, decoupling_ttest, proportion_test_one_sided

log = logging.getLogger("dosetrial")
FLOAT_FORMAT = "%.10g"
TEST_COLUMNS = ["test_id", "analysis", "kind", "estimate", "se", "statistic", "p",
                "ci_lower", "ci_upper", "odds_ratio", "or_lower", "or_upper", "nnh",
                "nnh_ceiling"]
ARM_FACTORS = ("lambda", "domain", "personalised")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DOSETRIAL_WORKERS", "1")))
    except ValueError:
        return 1


class _Tagged(logging.LoggerAdapter):
    def process(self, msg, kwargs):
        return f"[{self.extra['tag']}] {msg}", kwargs


def tagged(tag):
    return _Tagged(log, {"tag": tag})


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def _dtype_name(s: pd.Series) -> str:
    if pd.api.types.is_bool_dtype(s):
        return "boolean"
    if pd.api.types.is_integer_dtype(s):
        return "integer"
    if pd.api.types.is_float_dtype(s):
        return "number"
    return "string"


def write_table(df: pd.DataFrame, path: Path, description: str = "") -> Path:
    """CSV with a ``<name>.schema.json`` sidecar describing its columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    write_schema(df, path, description)
    return path


def write_schema(df: pd.DataFrame, path: Path, description: str = ""):
    schema = {"file": path.name, "description": description, "rows": int(len(df)),
              "columns": [{"name": str(c), "type": _dtype_name(df[c])} for c in df.columns]}
    side = path.with_name(path.stem + ".schema.json")
    side.write_text(json.dumps(schema, indent=2) + "\n")


def write_json(obj, path: Path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


@contextmanager
def staged(target: Path):
    """Build a directory under a temporary name; rename it into place on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(f".{target.name}.partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    tmp.rename(target)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingResults(f"{what} not found at {path}; run the earlier stage first")
    return path


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def stage_simulate(cfg: AnalysisConfig, root: Path) -> Path:
    d = cfg.data
    truth = replace(default_study(d.n_participants, cfg.seed, d.n_sessions, d.n_weeks),
                    dropout_prob=d.dropout_prob, missing_prob=d.missing_prob)
    table = simulate_study(truth)
    with staged(root / "data") as tmp:
        for name, path in table.write_csv(tmp).items():
            write_schema(pd.read_csv(path), path, f"simulated {name}")
        tagged("simulate").info("%d participants, %d rows", table.assignments.shape[0],
                                len(table))
    return root / "data"


def load_table(cfg: AnalysisConfig, root: Path) -> ObservationTable:
    if cfg.data.source == "files":
        d = cfg.data
        return ingest_csv(cfg.resolve(d.observations), cfg.registry,
                          assignments=cfg.resolve(d.assignments),
                          covariates=cfg.resolve(d.covariates) if d.covariates else None)
    data = _require(root / "data", "simulated data")
    return read_table(data, cfg.registry)


def table_for(cfg: AnalysisConfig, table: ObservationTable, outcome: str) -> ObservationTable:
    if outcome in cfg.pools:
        items = list(cfg.pools[outcome])
        return pool_items(table.select(items), outcome, items)
    return table.select(outcome)


def arm_frame(table: ObservationTable) -> pd.DataFrame:
    arms = table.assignments.copy()
    arms["companionship"] = ((arms["lambda"] > 0) & (arms["domain"] == "Emotional")).astype(int)
    return arms


def select_ids(arms: pd.DataFrame, selector: dict | None, exclude=None) -> list[str]:
    """Participant ids whose arm columns take one of the listed values."""
    if selector is None:
        return sorted(set(arms.index) - set(exclude or ()))
    mask = np.ones(len(arms), dtype=bool)
    for col, values in selector.items():
        if col not in arms.columns:
            raise MissingResults(f"selector column {col!r} is not an arm column")
        values = values if isinstance(values, (list, tuple)) else [values]
        col_vals = arms[col]
        if col == "lambda":
            mask &= np.isin(col_vals.to_numpy(dtype=float), np.asarray(values, dtype=float))
        else:
            mask &= col_vals.astype(str).str.lower().isin([str(v).lower() for v in values]).to_numpy()
    return sorted(arms.index[mask])


# ---------------------------------------------------------------------------
# model fitting
# ---------------------------------------------------------------------------

def _observed_weights(frame: pd.DataFrame, info: DesignInfo) -> dict:
    per_subject = frame.drop_duplicates("participant")
    out = {}
    for name in ARM_FACTORS:
        if name in info.variables():
            counts = per_subject[name].value_counts(normalize=True, sort=False)
            out[name] = [[_plain(k), float(v)] for k, v in counts.items()]
    return out


def _plain(v):
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.floating, float)):
        return float(v)
    return v


def fit_one(cfg: AnalysisConfig, m: ModelConfig, table: ObservationTable, out_dir: Path):
    """Fit one configured model and write its artifacts into ``out_dir``."""
    tlog = tagged(m.name)
    sub = table_for(cfg, table, m.outcome)
    spec = cfg.spec(m)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"name": m.name, "outcome": m.outcome, "formula": spec.formula}
    if m.select_order:
        specs = [spec.with_poly_order(int(k)) for k in m.orders]
        comp = compare_fixed_specs(specs, sub)
        tab = comp.table.drop(columns=["spec"])
        write_table(tab, out_dir / "comparison.csv", "polynomial order comparison under ML")
        spec = specs[comp.selected]
        record["selected_order"] = int(spec.poly_order)
        record["lrt_chain_error"] = comp.chain_error
        tlog.info("AIC selects poly order %d", spec.poly_order)
    model = fit_any(spec, sub, criterion=m.criterion)
    payload = model.to_dict()
    payload["config"] = record
    frame = sub.model_frame(m.outcome)
    if cfg.grid_weights == "observed":
        payload["grid_weights"] = _observed_weights(frame, model.design_info)
    write_json(payload, out_dir / "model.json")
    write_table(pd.DataFrame(model.coef_table()), out_dir / "coefficients.csv",
                "fixed-effect estimates with Wald z inference")
    try:
        slopes = extract_subject_slopes(model)
    except (NoRandomSlope, AttributeError):
        slopes = None
    if slopes is not None:
        s = slopes.rename_axis("participant_id").reset_index()
        write_table(s, out_dir / "subject_slopes.csv", "fixed time slope plus slope BLUP")
    group = ["lambda", "time"] if "time" in frame.columns else ["lambda"]
    raw = frame.groupby(group, sort=True)["value"].agg(["mean", "count"]).reset_index()
    write_table(raw, out_dir / "raw_means.csv", "observed means per lambda and time")
    tlog.info("fitted %s (n=%d)", spec.formula, model.n)
    return m.name


def _fit_job(args):
    cfg, m, table, out_dir = args
    return fit_one(cfg, m, table, out_dir)


def stage_analyze(cfg: AnalysisConfig, root: Path) -> Path:
    table = load_table(cfg, root)
    with staged(root / "models") as tmp:
        jobs = [(cfg, m, table, tmp / m.name) for m in cfg.models]
        n = min(worker_count(), len(jobs))
        if n > 1:
            with ProcessPoolExecutor(max_workers=n) as pool:
                list(pool.map(_fit_job, jobs))
        else:
            for job in jobs:
                _fit_job(job)
    return root / "models"


# ---------------------------------------------------------------------------
# contrasts
# ---------------------------------------------------------------------------

@dataclass
class StoredModel:
    """Fixed-effect estimates reloaded from ``model.json``; enough for EMMs."""

    coef: np.ndarray
    cov: np.ndarray
    labels: list
    design_info: DesignInfo
    family: str
    grid_weights: dict

    @classmethod
    def load(cls, path: Path) -> "StoredModel":
        d = json.loads(Path(path).read_text())
        rows = d["coefficients"]
        info = DesignInfo.from_dict(d["design"])
        weights = {k: dict((tuple(p)[0], p[1]) for p in v)
                   for k, v in d.get("grid_weights", {}).items()}
        return cls(coef=np.array([r["estimate"] for r in rows]), cov=np.array(d["cov"]),
                   labels=[r["term"] for r in rows], design_info=info,
                   family=d["family"], grid_weights=weights)


def _grid(model: StoredModel, m: ModelConfig, levels=None) -> ReferenceGrid:
    return ReferenceGrid(levels=dict(levels or {}), weights=dict(model.grid_weights),
                         time=None if m.time is None else [m.time])


def _contrast_row(test_id, analysis, res):
    row = {"test_id": test_id, "analysis": analysis, "kind": "contrast",
           "estimate": res.estimate, "se": res.se, "statistic": res.z, "p": res.p,
           "ci_lower": res.ci[0], "ci_upper": res.ci[1]}
    if res.odds_ratio is not None:
        row.update(odds_ratio=res.odds_ratio, or_lower=res.or_ci[0], or_upper=res.or_ci[1])
    return row


def contrast_one(cfg: AnalysisConfig, m: ModelConfig, models_dir: Path, out_dir: Path):
    model = StoredModel.load(_require(models_dir / m.name / "model.json", f"model {m.name}"))
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = _grid(model, m)
    write_table(emm(model, grid, by=("lambda",)), out_dir / "emm.csv",
                "estimated marginal means by lambda")
    rows = []
    for c in m.contrasts:
        res = paired_contrast(model, grid, factor=c.factor,
                              split=(tuple(c.split[0]), tuple(c.split[1])), name=c.name)
        rows.append(_contrast_row(f"{m.name}:{c.name}", m.name, res))
    for s in m.slopes:
        sl = condition_slopes(model, _grid(model, m, s.levels), by=()).iloc[0]
        rows.append({"test_id": f"{m.name}:slope:{s.name}", "analysis": m.name, "kind": "slope",
                     "estimate": sl["slope"], "se": sl["se"], "statistic": sl["z"],
                     "p": sl["p"], "ci_lower": sl["ci_lower"], "ci_upper": sl["ci_upper"]})
    write_table(pd.DataFrame(rows, columns=TEST_COLUMNS), out_dir / "tests.csv",
                "contrast and slope tests (two-sided Wald z)")


def stage_contrast(cfg: AnalysisConfig, root: Path) -> Path:
    models_dir = _require(root / "models", "fitted models")
    with staged(root / "contrasts") as tmp:
        for m in cfg.models:
            contrast_one(cfg, m, models_dir, tmp / m.name)
    return root / "contrasts"


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def _slopes(root: Path, name: str) -> pd.Series:
    path = _require(root / "models" / name / "subject_slopes.csv", f"subject slopes of {name}")
    s = pd.read_csv(path, dtype={"participant_id": str})
    return pd.Series(s["slope"].to_numpy(), index=s["participant_id"])


def stage_trajectory(cfg: AnalysisConfig, root: Path) -> Path:
    tr = cfg.trajectory
    table = load_table(cfg, root)
    arms = arm_frame(table)
    profiles = classify_profiles(_slopes(root, tr.liking_model), _slopes(root, tr.wanting_model),
                                 tie=tr.tie)
    rows = []
    for t in tr.proportion_tests:
        exp = select_ids(arms, t.exposed)
        ctl = select_ids(arms, t.control, exclude=exp)
        f = profiles.frame
        hit = f["profile"] == t.profile
        is_e, is_c = f["participant_id"].isin(exp), f["participant_id"].isin(ctl)
        res = proportion_test_one_sided((int((hit & is_e).sum()), int(is_e.sum())),
                                        (int((hit & is_c).sum()), int(is_c.sum())),
                                        direction=t.direction)
        rows.append({"test_id": f"trajectory:{t.name}", "analysis": "trajectory",
                     "kind": "proportion", "estimate": res.risk_exposed - res.risk_control,
                     "se": np.nan, "statistic": res.z, "p": res.p,
                     "ci_lower": np.nan, "ci_upper": np.nan, "odds_ratio": res.odds_ratio,
                     "or_lower": res.or_ci[0], "or_upper": res.or_ci[1], "nnh": res.nnh,
                     "nnh_ceiling": res.nnh_ceiling})
    for t in tr.decoupling_tests:
        exp = select_ids(arms, t.exposed)
        ctl = select_ids(arms, t.control, exclude=exp)
        f = profiles.frame.set_index("participant_id")["decoupling_score"]
        res = decoupling_ttest(f.reindex(exp).dropna(), f.reindex(ctl).dropna(),
                               direction=t.direction)
        rows.append({"test_id": f"trajectory:{t.name}", "analysis": "trajectory",
                     "kind": "welch_t", "estimate": res.cohens_d, "se": np.nan,
                     "statistic": res.t, "p": res.p, "ci_lower": np.nan, "ci_upper": np.nan})
    with staged(root / "trajectory") as tmp:
        write_table(profiles.frame, tmp / "profiles.csv", "per-participant trajectory profiles")
        counts = profiles.counts().rename_axis("profile").reset_index(name="count")
        write_table(counts, tmp / "profile_counts.csv", f"dropped ids: {profiles.dropped}")
        write_table(pd.DataFrame(rows, columns=TEST_COLUMNS), tmp / "tests.csv",
                    "one-sided proportion tests (estimate = risk difference) and Welch "
                    "tests (estimate = Cohen's d)")
    tagged("trajectory").info("%d profiles, %d dropped", len(profiles.frame), profiles.dropped)
    return root / "trajectory"


# ---------------------------------------------------------------------------
# psychometrics
# ---------------------------------------------------------------------------

def _wide(table: ObservationTable, outcome: str, time: int) -> pd.DataFrame:
    obs = table.observations
    obs = obs[(obs["outcome"] == outcome) & (obs["time"] == time)]
    wide = obs.pivot(index="participant_id", columns="item", values="value")
    return wide.dropna().sort_index()


def stage_psychometrics(cfg: AnalysisConfig, root: Path) -> Path:
    ps = cfg.psychometrics
    table = load_table(cfg, root)
    arms = arm_frame(table)
    tlog = tagged("psychometrics")
    pre = _wide(table, ps.outcome, ps.pre_time)
    post = _wide(table, ps.outcome, ps.post_time)
    corr = polychoric_matrix(pre)
    sol = efa_uls(corr, ps.n_factors)
    scores = score_anchored(sol, pre, post)
    load = pd.DataFrame(sol.loadings, columns=[f"F{j + 1}" for j in range(sol.k)])
    load.insert(0, "item", sol.items)
    load["uniqueness"] = sol.uniqueness
    both = scores.pre.index.intersection(scores.post.index)
    shift = scores.post.loc[both] - scores.pre.loc[both]
    exp = set(select_ids(arms, ps.shift_exposed))
    is_exp = shift.index.isin(exp)
    rows = []
    for j, col in enumerate(shift.columns):
        a, b = shift.loc[is_exp, col].to_numpy(), shift.loc[~is_exp, col].to_numpy()
        res = stats.ttest_ind(a, b, equal_var=False)
        rows.append({"test_id": f"psychometrics:shift:{col}", "analysis": "psychometrics",
                     "kind": "welch_t", "estimate": float(a.mean() - b.mean()),
                     "se": np.nan, "statistic": float(res.statistic), "p": float(res.pvalue),
                     "ci_lower": np.nan, "ci_upper": np.nan})
    long_scores = pd.concat([scores.pre.assign(time=ps.pre_time),
                             scores.post.assign(time=ps.post_time)])
    long_scores = long_scores.rename_axis("participant_id").reset_index()
    with staged(root / "psychometrics") as tmp:
        write_table(load, tmp / "loadings.csv", f"ULS + oblimin loadings, rmsr={sol.rmsr:.6g}")
        phi = pd.DataFrame(sol.phi, columns=load.columns[1:1 + sol.k])
        write_table(phi, tmp / "factor_correlations.csv", "oblique factor correlations")
        R = pd.DataFrame(corr.corr, columns=corr.items)
        R.insert(0, "item", corr.items)
        write_table(R, tmp / "polychoric.csv", f"polychoric matrix (repair={corr.repair:.3g})")
        write_table(long_scores, tmp / "factor_scores.csv", "regression scores anchored on pre")
        write_table(pd.DataFrame(rows, columns=TEST_COLUMNS), tmp / "tests.csv",
                    "pre-to-post factor-score shift, exposed vs rest (Welch, two-sided)")
        if ps.preferences is not None:
            pref = _wide(table, ps.preferences, 0)
            X = standardise(pref.to_numpy())
            km = kmeans(X, ps.n_clusters, seed=cfg.seed)
            clusters = pd.DataFrame({"participant_id": pref.index, "cluster": km.labels})
            write_table(clusters, tmp / "clusters.csv", f"k-means, inertia={km.inertia:.6g}")
            sil = silhouette_diagnostics(X, ks=ps.silhouette_k, seed=cfg.seed)
            write_table(sil, tmp / "silhouette.csv", "silhouette diagnostics by k")
    tlog.info("%d items, %d factors, explained %s", len(sol.items), sol.k,
              np.round(sol.explained, 3).tolist())
    return root / "psychometrics"


# ---------------------------------------------------------------------------
# attrition, multiplicity and the manifest
# ---------------------------------------------------------------------------

def attrition_tests(cfg: AnalysisConfig, table: ObservationTable):
    at = cfg.attrition
    done = table.select(at.completion_outcome) if at.completion_outcome else table
    rows, counts = [], []
    for arm in at.arms:
        tab = attrition_table(table, done, arm)
        c = tab.copy()
        c.insert(0, "status", c.index)
        c.columns = ["status"] + [f"{arm}={_plain(v)}" for v in tab.columns]
        counts.append(c.melt(id_vars="status", var_name="arm_level", value_name="count"))
        levels = list(tab.columns)
        if len(levels) == 2:
            pairs = [(f"attrition:{arm}", tab.to_numpy())]
        else:
            # one level against the rest of the arm
            pairs = []
            for lv in levels:
                inside = tab[lv].to_numpy()
                rest = tab.drop(columns=lv).sum(axis=1).to_numpy()
                name = f"attrition:{arm}={lv:g}" if arm == "lambda" else f"attrition:{arm}={lv}"
                pairs.append((name, np.column_stack([inside, rest])))
        for name, t2 in pairs:
            rows.append({"test_id": name, "analysis": "attrition", "kind": "fisher_exact",
                         "estimate": np.nan, "se": np.nan, "statistic": np.nan,
                         "p": fisher_exact(t2), "ci_lower": np.nan, "ci_upper": np.nan})
    return pd.DataFrame(rows, columns=TEST_COLUMNS), pd.concat(counts, ignore_index=True)


def collect_tests(cfg: AnalysisConfig, root: Path) -> pd.DataFrame:
    frames = []
    for m in cfg.models:
        p = root / "contrasts" / m.name / "tests.csv"
        if p.exists():
            frames.append(pd.read_csv(p))
    for stage in ("trajectory", "psychometrics"):
        p = root / stage / "tests.csv"
        if p.exists():
            frames.append(pd.read_csv(p))
    frames = [f for f in frames if len(f)]
    if not frames:
        return pd.DataFrame(columns=TEST_COLUMNS)
    return pd.concat(frames, ignore_index=True)[TEST_COLUMNS]


def annotate(cfg: AnalysisConfig, tests: pd.DataFrame) -> pd.DataFrame:
    """Attach hierarchical BH adjustments. Tests outside every family are
    adjusted on their own (scope = the test itself)."""
    raw = dict(zip(tests["test_id"], tests["p"]))
    fams, covered = [], set()
    for f in cfg.families:
        present = {t: raw[t] for t in f.tests if t in raw}
        covered |= set(present)
        fams.append(HypothesisFamily(f.id, f.tier, present, dict(f.groups)))
    rest = {t: p for t, p in raw.items() if t not in covered}
    if rest:
        fams.append(HypothesisFamily("unregistered", "Descriptive", rest))
    adj = to_frame(apply_hierarchy(fams)).set_index("test_id")
    out = tests.copy()
    for col in ("family", "tier", "p_adj", "scope", "m"):
        out[col] = adj[col].reindex(out["test_id"]).to_numpy()
    out["reject_05"] = out["p_adj"] <= 0.05
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: AnalysisConfig, root: Path, stages):
    import numpy
    import scipy
    files = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and not rel.startswith(".") and rel != "manifest.json":
            files[rel] = _sha256(p)
    manifest = {
        "config": str(cfg.path) if cfg.path else None,
        "config_sha256": cfg.sha256,
        "seed": cfg.seed,
        "stages": list(stages),
        "workers": worker_count(),
        "versions": {"dosetrial": __version__, "python": platform.python_version(),
                     "numpy": numpy.__version__, "scipy": scipy.__version__,
                     "pandas": pd.__version__},
        "outputs": files,
    }
    write_json(manifest, root / "manifest.json")


def stage_report(cfg: AnalysisConfig, root: Path, stages=("report",)) -> Path:
    table = load_table(cfg, root) if cfg.attrition.enabled else None
    with staged(root / "report") as tmp:
        if table is not None:
            att, counts = attrition_tests(cfg, table)
            write_table(att, tmp / "attrition_tests.csv", "Fisher exact tests of attrition")
            write_table(counts, tmp / "attrition_counts.csv", "completers per arm level")
        tests = collect_tests(cfg, root)
        if table is not None:
            tests = pd.concat([tests, att], ignore_index=True) if len(tests) else att
        missing = sorted(set(t for f in cfg.families for t in f.tests) - set(tests["test_id"]))
        if missing:
            tagged("report").warning("family tests without results: %s", missing)
        write_table(annotate(cfg, tests), tmp / "results.csv",
                    "all tests with hierarchical BH adjustment")
    write_manifest(cfg, root, stages)
    return root / "report"


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------

STAGES = ("simulate", "analyze", "contrast", "trajectory", "psychometrics", "plot", "report")


def run_stage(name: str, cfg: AnalysisConfig, root: Path):
    from .plots import emit_plots
    if name == "simulate":
        return stage_simulate(cfg, root)
    if name == "analyze":
        return stage_analyze(cfg, root)
    if name == "contrast":
        return stage_contrast(cfg, root)
    if name == "trajectory":
        return stage_trajectory(cfg, root)
    if name == "psychometrics":
        return stage_psychometrics(cfg, root)
    if name == "plot":
        with staged(root / "plots") as tmp:
            emit_plots(root, tmp)
        return root / "plots"
    if name == "report":
        return stage_report(cfg, root)
    raise ValueError(name)


def planned_stages(cfg: AnalysisConfig):
    out = ["simulate"] if cfg.data.source == "simulate" else []
    out += ["analyze", "contrast"]
    if cfg.trajectory.enabled:
        out.append("trajectory")
    if cfg.psychometrics.enabled:
        out.append("psychometrics")
    if cfg.plots:
        out.append("plot")
    out.append("report")
    return out


def run_pipeline(cfg: AnalysisConfig, output_dir: Path | None = None) -> Path:
    """Every stage into a fresh directory that replaces ``output_dir`` atomically."""
    target = Path(output_dir if output_dir is not None else cfg.output_dir)
    stages = planned_stages(cfg)
    with staged(target) as tmp:
        for name in stages:
            tagged(name).info("start")
            if name == "report":
                stage_report(cfg, tmp, stages)
            else:
                run_stage(name, cfg, tmp)
    return target

