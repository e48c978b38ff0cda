# test_cli.py
import os

import pandas as pd
import pytest

from p1_config import ConfigError, dump_run_config, load_run_config
from run_cstf import build_parser, main, output_path, resolve_config


@pytest.fixture
def config_file(fast_run_cfg, tmp_path):
    path = tmp_path / "run.json"
    cfg = fast_run_cfg.model_copy(update={"output_dir": str(tmp_path / "out")})
    dump_run_config(cfg, str(path))
    return path


def test_flags_override_the_config_file(config_file):
    args = build_parser().parse_args(
        ["eval", "--config", str(config_file), "--seed", "42", "--iou", "0.7", "--interp", "11pt", "--precision", "32"]
    )
    cfg = resolve_config(args)
    assert cfg.seed == 42 and cfg.precision == 32
    assert cfg.metric.iou_threshold == 0.7 and cfg.metric.interpolation == "11pt"
    assert cfg.model.stages == 2


def test_bad_worker_count_is_a_config_error(config_file):
    args = build_parser().parse_args(["ablate", "--config", str(config_file), "--workers", "0"])
    with pytest.raises(ConfigError):
        resolve_config(args)


def test_relative_output_dirs_resolve_next_to_the_script():
    cfg = resolve_config(build_parser().parse_args(["train", "--out", "results"]))
    path = output_path(cfg, "metrics.csv")
    assert os.path.isabs(path) and path.endswith(os.path.join("results", "metrics.csv"))


def test_missing_config_returns_error_code(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 1
    assert "[ERROR]" in capsys.readouterr().out


def test_train_then_eval(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["train", "--config", str(config_file)]) == 0
    assert (out / "params.npz").exists()
    assert list(pd.read_csv(out / "loss.csv").columns) == ["step", "loss"]
    metrics = pd.read_csv(out / "metrics.csv")
    assert list(metrics.columns) == ["variant", "map", "recall", "iou", "interp", "seed"]

    assert main(["eval", "--config", str(config_file), "--interp", "11pt"]) == 0
    metrics = pd.read_csv(out / "metrics.csv")
    assert metrics["interp"].item() == "11pt"
    assert (out / "pr_curve.png").exists()


def test_commands_record_the_resolved_config(config_file, fast_run_cfg, tmp_path):
    assert main(["train", "--config", str(config_file), "--seed", "5", "--iou", "0.7"]) == 0
    saved = load_run_config(str(tmp_path / "out" / "run_config.json"))
    assert saved.seed == 5 and saved.metric.iou_threshold == 0.7
    assert saved.model == fast_run_cfg.model
    assert saved.optimizer == fast_run_cfg.optimizer


def test_eval_without_checkpoint_fails_cleanly(config_file):
    assert main(["eval", "--config", str(config_file)]) == 1


def test_match_command(config_file, tmp_path):
    assert main(["match", "--config", str(config_file)]) == 0
    lines = (tmp_path / "out" / "matches.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# A=4,B=4,")
    assert lines[1] == "index_a,index_b,confidence"
