import filecmp
from pathlib import Path

import pandas as pd
import pytest
import yaml

from dosetrial.cli import main
from dosetrial.config import load_config, parse_config
from dosetrial.errors import ConfigError, MissingResults
from dosetrial.plots import emit_plots, render_curve

DEMO = Path(__file__).resolve().parents[1] / "src" / "dosetrial" / "configs" / "demo.yaml"


def small_demo(tmp_path, **data):
    raw = yaml.safe_load(DEMO.read_text())
    raw["data"].update({"n_participants": 80, "n_sessions": 5, "n_weeks": 2, **data})
    p = tmp_path / "demo.yaml"
    p.write_text(yaml.safe_dump(raw))
    return p, raw


@pytest.fixture(scope="module")
def demo_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("demo")
    cfg, _ = small_demo(tmp)
    codes = [main(["run", str(cfg), "-o", str(tmp / name)]) for name in ("a", "b")]
    return tmp, codes


def _differences(cmp):
    out = cmp.diff_files + cmp.left_only + cmp.right_only + cmp.funny_files
    for sub in cmp.subdirs.values():
        out += _differences(sub)
    return out


def test_demo_run_smoke(demo_runs):
    tmp, codes = demo_runs
    assert codes == [0, 0]
    out = tmp / "a"
    assert (out / "manifest.json").exists()
    for stage in ("data", "models", "contrasts", "trajectory", "psychometrics", "plots", "report"):
        assert (out / stage).is_dir(), stage
    for csv in out.rglob("*.csv"):
        assert csv.with_suffix(".schema.json").exists(), csv
    assert len(list((out / "plots").glob("*.svg"))) == 7


def test_reruns_are_byte_identical(demo_runs):
    tmp, _ = demo_runs
    assert _differences(filecmp.dircmp(tmp / "a", tmp / "b")) == []


def test_missing_outcome_is_config_error(tmp_path, capsys):
    _, raw = small_demo(tmp_path)
    del raw["outcomes"]["helpfulness"]
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(raw))
    out = tmp_path / "never"
    assert main(["run", str(bad), "-o", str(out)]) == 2
    assert not out.exists()
    assert "helpfulness" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        load_config(bad)


def test_unknown_key_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config({"outcomes": {}, "models": [], "bogus": 1})
    assert main(["run", str(tmp_path / "nope.yaml")]) == 2


def test_print_schema(capsys):
    assert main(["--print-schema"]) == 0
    text = capsys.readouterr().out
    for key in ("output_dir", "n_participants", "formula", "split"):
        assert key in text


def _files_config(tmp_path, demo_runs, mutate=None):
    src = demo_runs[0] / "a" / "data"
    obs = pd.read_csv(src / "observations.csv", keep_default_na=False)
    obs = obs[obs["outcome"] == "likeability"]
    if mutate is not None:
        obs = mutate(obs)
    obs.to_csv(tmp_path / "obs.csv", index=False)
    (tmp_path / "arms.csv").write_text((src / "assignments.csv").read_text())
    cfg = {"output_dir": str(tmp_path / "out"),
           "data": {"source": "files", "observations": "obs.csv", "assignments": "arms.csv"},
           "outcomes": {"likeability": {"type": "continuous", "scale": [0, 100],
                                        "time_unit": "session"}},
           "models": [{"name": "likeability", "outcome": "likeability",
                       "formula": "value ~ lambda + time + (1 + time | participant)",
                       "select_order": False,
                       "contrasts": [{"name": "rs", "split": [[0.5, 1.0], [-0.5, -1.0]]}]}],
           "trajectory": {"enabled": False}, "psychometrics": {"enabled": False}}
    p = tmp_path / "files.yaml"
    p.write_text(yaml.safe_dump(cfg))
    return p


def test_files_source_analyze(tmp_path, demo_runs):
    cfg = _files_config(tmp_path, demo_runs)
    assert main(["analyze", str(cfg)]) == 0
    assert main(["contrast", str(cfg)]) == 0
    tests = pd.read_csv(tmp_path / "out" / "contrasts" / "likeability" / "tests.csv")
    assert "likeability:rs" in set(tests["test_id"])


def test_bad_data_exit_code(tmp_path, demo_runs, capsys):
    def out_of_range(obs):
        obs = obs.copy()
        obs.iloc[3, obs.columns.get_loc("value")] = 250.0
        return obs
    cfg = _files_config(tmp_path, demo_runs, out_of_range)
    assert main(["analyze", str(cfg)]) == 3
    assert "data error" in capsys.readouterr().err


def test_stage_without_inputs(tmp_path, demo_runs):
    cfg = _files_config(tmp_path, demo_runs)
    # contrasts need fitted models; a missing stage is reported, not crashed on
    assert main(["contrast", str(cfg)]) == 3


def emm_table(n=5):
    lam = [-1.0, -0.5, 0.0, 0.5, 1.0][:n]
    return pd.DataFrame({"lambda": lam, "emm": [50 + 2 * v for v in lam],
                         "ci_lower": [48 + 2 * v for v in lam], "ci_upper": [52 + 2 * v for v in lam]})


def test_render_curve():
    svg = render_curve(emm_table(), pd.DataFrame({"lambda": [0.0], "mean": [51.0]}), title="x")
    assert svg.startswith("<svg") or svg.startswith("<?xml")
    assert svg.count('class="emm-point"') == 5
    assert 'class="ci-band"' in svg
    assert svg.count('class="raw-mean"') == 1
    with pytest.raises(MissingResults):
        render_curve(emm_table().iloc[:0])


def test_emit_plots_per_outcome(tmp_path):
    for name in ("one", "two"):
        d = tmp_path / "contrasts" / name
        d.mkdir(parents=True)
        emm_table().to_csv(d / "emm.csv", index=False)
    paths = emit_plots(tmp_path)
    assert sorted(p.name for p in paths) == ["one.svg", "two.svg"]
    with pytest.raises(MissingResults):
        emit_plots(tmp_path / "empty")
