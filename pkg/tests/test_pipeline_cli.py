import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from oodgate.cli import main
from oodgate.config import ConfigError, RunConfig
from oodgate.errors import MissingUpstream
from oodgate.pipeline import holdout_rows, pick_best, read_dump, run
from oodgate.registry import ALL_METHODS
from oodgate.tensor_io import read_score_table

from conftest import SMALL_CONFIG


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    cfg = RunConfig.from_dict(SMALL_CONFIG, out=str(tmp_path_factory.mktemp("small")))
    run("all", cfg)
    return cfg


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def stderr_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


# --- config ---------------------------------------------------------------


def test_config_defaults_and_overrides(tmp_path):
    cfg = RunConfig.from_dict({}, out=str(tmp_path))
    assert cfg.seeds == [0, 1, 2, 3, 4] and cfg.methods == list(ALL_METHODS)
    assert RunConfig.from_dict({}, seed=7).seeds == [7]
    assert [g.name for g in cfg.gates] == ["original", "confidence", "feature", "combined"]


def test_digest_ignores_out_dir():
    a = RunConfig.from_dict(SMALL_CONFIG, out="x")
    b = RunConfig.from_dict(SMALL_CONFIG, out="y")
    assert a.digest() == b.digest() and a.run_dir != b.run_dir
    assert RunConfig.from_dict(SMALL_CONFIG, seed=0).digest() != a.digest()


@pytest.mark.parametrize(
    "doc",
    [
        {"seeds": []},
        {"seeds": [1, 1]},
        {"seeds": [-1]},
        {"methods": ["softmax_plus"]},
        {"bogus": 1},
        {"train": {"learning_rate": 0.1}},
        {"gates": [{"name": "g", "stages": [["energy", 75]]}], "methods": ["mcp"]},
        {"gates": [{"name": "g", "stages": [["mcp", 175]]}]},
        {"dataset": {"images": "x"}},
        {"dataset": {"synthetic": {"rho": 2}}},
        {"model": {"zoo": "resnet18"}},
        {"scoring": {"holdout_fraction": 0}},
        {"grids": {"dice": {"keep": []}}},
    ],
)
def test_invalid_configs(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_holdout_takes_tail_of_each_class():
    y = np.array([0, 1, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0])
    h = holdout_rows(y, 0.1)
    assert np.flatnonzero(h).tolist() == [5, 11]


def test_pick_best_prefers_first_on_ties():
    is_id = np.array([True, True, False, False])
    orig = np.ones(4, bool)
    good = np.array([2.0, 3.0, 0.0, 1.0])
    params, scores = pick_best([({"a": 1}, good[::-1].copy()), ({"a": 2}, good), ({"a": 3}, good)], orig, is_id)
    assert params["a"] == 2 and params["auroc_ood"] == 1.0
    np.testing.assert_array_equal(scores, good)


# --- CLI exit codes -------------------------------------------------------


def test_eval_without_scores_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", SMALL_CONFIG)
    assert main(["eval", "--config", cfg, "--out", str(tmp_path), "-q"]) == 2
    err = stderr_line(capsys)
    assert err["exit"] == 2 and err["stage"] == "eval" and err["error"] == "MissingUpstream"


def test_train_without_data_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", SMALL_CONFIG)
    assert main(["train", "--config", cfg, "--out", str(tmp_path), "-q"]) == 2
    assert stderr_line(capsys)["exit"] == 2


def test_bad_config_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"seeds": [0, 0]})
    assert main(["all", "--config", cfg, "-q"]) == 1
    assert stderr_line(capsys)["error"] == "ConfigError"
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["all", "--config", str(tmp_path / "broken.json"), "-q"]) == 1
    stderr_line(capsys)
    assert main(["all", "--config", str(tmp_path / "absent.json"), "-q"]) == 1
    stderr_line(capsys)
    assert main(["transmogrify", "-q"]) == 1
    stderr_line(capsys)


def test_runtime_failure_exits_3(tmp_path, capsys, monkeypatch):
    import oodgate.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "run", boom)
    cfg = write_config(tmp_path / "c.json", SMALL_CONFIG)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path), "-q"]) == 3
    assert stderr_line(capsys)["message"] == "disk on fire"


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"seeds": []})
    p = subprocess.run([sys.executable, "-m", "oodgate", "synth", "--config", cfg], capture_output=True, text=True)
    assert p.returncode == 1
    assert json.loads(p.stderr)["exit"] == 1


# --- pipeline outputs -----------------------------------------------------


def test_run_layout(small_run):
    d = small_run.run_dir
    for name in ("config.json", "eval.json", "gates.json", "report.json", "report.txt", "data/manifest.csv"):
        assert (d / name).is_file(), name
    for s in small_run.seeds:
        for name in ("model/model.json", "dump/index.csv", "stats/index.json", "scores.csv", "tuning.json"):
            assert (d / f"seed{s}" / name).is_file(), name


def test_report_has_every_method_and_metric(small_run):
    rep = json.loads((small_run.run_dir / "report.json").read_text())
    assert sorted(rep["methods"]) == sorted(ALL_METHODS) and len(rep["methods"]) == 16
    for m in rep["methods"].values():
        assert {"auroc_ood", "auroc_f"} <= set(m["mean"])
        assert len(m["per_seed"]) == 2
    assert set(rep["gates"]) == {"original", "confidence", "feature", "combined"}


def test_score_tables_cover_counterfactuals(small_run):
    t = read_score_table(small_run.run_dir / "seed0" / "scores.csv")
    n_ood = int(t.mask(variant="original", domain="OOD").sum())
    assert n_ood == 30 and int(t.mask(variant="counterfactual").sum()) == n_ood
    assert int(t.mask(domain="ID").sum()) == 30


def test_rerun_is_byte_identical(small_run, tmp_path):
    again = RunConfig.from_dict(SMALL_CONFIG, out=str(tmp_path))
    run("all", again)
    for name in ("report.json", "report.txt", "seed0/scores.csv", "seed1/tuning.json"):
        assert (again.run_dir / name).read_bytes() == (small_run.run_dir / name).read_bytes()


def test_report_stage_checks_seeds(small_run, tmp_path):
    d = tmp_path / small_run.digest()
    shutil.copytree(small_run.run_dir, d)
    cfg = RunConfig.from_dict(SMALL_CONFIG, out=str(tmp_path))
    (d / "eval.json").write_text((d / "eval.json").read_text().replace('"seeds": [\n    0,\n    1\n  ]', '"seeds": [0]'))
    with pytest.raises(MissingUpstream):
        run("report", cfg)


def test_external_dumps_score_identically(small_run, tmp_path):
    ext = tmp_path / "dumps"
    for s in small_run.seeds:
        shutil.copytree(small_run.run_dir / f"seed{s}" / "dump", ext / f"seed{s}")
    doc = {**SMALL_CONFIG, "dataset": {"dump": str(ext)}}
    cfg = RunConfig.from_dict(doc, out=str(tmp_path / "runs"))
    run("all", cfg)
    for s in small_run.seeds:
        a = (cfg.run_dir / f"seed{s}" / "scores.csv").read_bytes()
        assert a == (small_run.run_dir / f"seed{s}" / "scores.csv").read_bytes()
    a = json.loads((cfg.run_dir / "report.json").read_text())
    b = json.loads((small_run.run_dir / "report.json").read_text())
    assert a == b


def test_external_dump_missing_seed(small_run, tmp_path):
    ext = tmp_path / "dumps"
    shutil.copytree(small_run.run_dir / "seed0" / "dump", ext / "seed0")
    cfg = RunConfig.from_dict({**SMALL_CONFIG, "dataset": {"dump": str(ext)}}, out=str(tmp_path / "runs"))
    with pytest.raises(MissingUpstream):
        run("all", cfg)
    (ext / "seed0" / "logits.npy").unlink()
    with pytest.raises(MissingUpstream):
        read_dump(ext / "seed0")


def test_cli_single_seed_run(tmp_path, capsys):
    doc = {**SMALL_CONFIG, "methods": ["mcp", "mahalanobis", "energy"],
           "gates": [{"name": "combined", "stages": [["mahalanobis", 75], ["mcp", 75]]}]}
    cfg = write_config(tmp_path / "c.json", doc)
    assert main(["all", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "[report]" in out
    runs = list((tmp_path / "o").iterdir())
    rep = json.loads((runs[0] / "report.json").read_text())
    assert rep["seeds"] == [3] and sorted(rep["methods"]) == ["energy", "mahalanobis", "mcp"]
