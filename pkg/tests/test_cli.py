import json

import pytest

from clipdca import cli
from clipdca.train import PretrainConfig, RunConfig


def test_read_config(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# finetune settings\nsteps = 12\nlr = 1e-3\nmethod = flyp\nweights.C5 = 0.5\n"
                 'model = {"depth": 1}\n', encoding="utf-8")
    cfg = cli.read_config(p)
    assert cfg == {"steps": 12, "lr": 1e-3, "method": "flyp", "weights.C5": 0.5, "model": {"depth": 1}}
    rc = cli.build(RunConfig, cfg, seed=4)
    assert (rc.steps, rc.lr, rc.method, rc.seed) == (12, 1e-3, "flyp", 4)
    assert rc.weights["C5"] == 0.5 and rc.weights["C1"] == 1.0
    assert cli.build(PretrainConfig, cfg).model == {"depth": 1}


def test_flags_override_config():
    rc = cli.build(RunConfig, {"seed": 1, "method": "dann"}, seed=9, method=None)
    assert rc.seed == 9 and rc.method == "dann"


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    for name in ("generate-data", "generate-styles", "pretrain", "unlearn", "finetune", "score-ood",
                 "evaluate", "report", "pca"):
        assert name in out


def test_errors_exit_nonzero(tmp_path, capsys):
    code = cli.main(["evaluate", "--out", str(tmp_path), "--corpus", str(tmp_path / "missing.json"),
                     "--checkpoint", str(tmp_path / "none.dca")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_generate_data_twice_is_identical(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n_classes = 2\nn_domains = 2\nimages_per_cell = 2\n", encoding="utf-8")
    for d in ("a", "b"):
        assert cli.main(["generate-data", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / d)]) == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(a["samples"]) == 8
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
