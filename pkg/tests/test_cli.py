"""Command-line behavior: exit codes, log and report outputs, determinism."""

import json
import os

import pytest

from kdkit.cli import main
from kdkit.logs import strip_timestamps

GOOD_CONFIG = """\
datasets:
  d:
    type: 'SyntheticImages'
    splits:
      train:
        dataset_id: 'd/train'
        params: {split: 'train', n: 16, image_size: 8, seed: 5}
      val:
        dataset_id: 'd/val'
        params: {split: 'val', n: 8, image_size: 8, seed: 5}
models:
  teacher_model: {name: 'tinyresnet_d3', params: {num_classes: 10}}
  student_model: {name: 'tinyresnet_d2', params: {num_classes: 10}, ckpt: './student.pt'}
train:
  num_epochs: 1
  train_data_loader: {dataset_id: 'd/train', random_sample: True, batch_size: 8}
  val_data_loader: {dataset_id: 'd/val', batch_size: 8}
  teacher: {sequential: 'empty', requires_grad: False}
  optimizer: {type: 'SGD', params: {lr: 0.1}}
  criterion:
    type: 'GeneralizedCustomLoss'
    org_term: {criterion: {type: 'CrossEntropyLoss', params: {}}, factor: 1.0}
    sub_terms:
test:
  test_data_loader: {dataset_id: 'd/val', batch_size: 8}
"""

BROKEN_CONFIG = GOOD_CONFIG.replace("name: 'tinyresnet_d2'", "name: 'tinyresnet_dd2'") \
                           .replace("type: 'SGD'", "type: 'SGDD'") \
                           .replace("dataset_id: 'd/train', random_sample",
                                    "dataset_id: 'nope/train', random_sample")


def _write(tmp_cwd, text, name="exp.yaml"):
    path = tmp_cwd / name
    path.write_text(text)
    return str(path)


def test_valid_run_exits_zero_and_writes_outputs(tmp_cwd, capsys):
    config = _write(tmp_cwd, GOOD_CONFIG)
    assert main(["--config", config, "--seed", "3"]) == 0
    assert os.path.exists("exp.log")
    report = json.load(open("exp.log.report.json"))
    assert report["stages"][0]["epochs"][0]["val_metrics"].keys() == {"top1"}
    assert os.path.exists("student.pt") and os.path.exists("student.pt.final")
    out = capsys.readouterr().out
    assert "stage=1 epoch=1" in out  # records echo to the console


def test_log_flag_overrides_the_default_path(tmp_cwd):
    config = _write(tmp_cwd, GOOD_CONFIG)
    assert main(["--config", config, "--seed", "3", "--log", "custom.log"]) == 0
    assert os.path.exists("custom.log") and os.path.exists("custom.log.report.json")
    assert not os.path.exists("exp.log")


def test_same_seed_runs_write_identical_logs(tmp_cwd):
    config = _write(tmp_cwd, GOOD_CONFIG)
    assert main(["--config", config, "--seed", "3", "--log", "a.log"]) == 0
    assert main(["--config", config, "--seed", "3", "--log", "b.log"]) == 0
    first = strip_timestamps(open("a.log").read())
    second = strip_timestamps(open("b.log").read())
    assert first == second


def test_broken_config_exits_two_and_names_every_problem(tmp_cwd, capsys):
    config = _write(tmp_cwd, BROKEN_CONFIG)
    assert main(["--config", config]) == 2
    err = capsys.readouterr().err
    for needle in ("tinyresnet_dd2", "SGDD", "nope/train"):
        assert needle in err
    assert err.count("config error:") >= 3
    assert not os.path.exists("exp.log")


def test_unreadable_config_exits_two(tmp_cwd, capsys):
    assert main(["--config", "missing.yaml"]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_unparseable_config_exits_two(tmp_cwd, capsys):
    config = _write(tmp_cwd, "a: [unclosed\n")
    assert main(["--config", config]) == 2
    assert "config error:" in capsys.readouterr().err


def test_runtime_failure_exits_one(tmp_cwd, capsys):
    config = _write(tmp_cwd, GOOD_CONFIG)
    assert main(["--config", config, "--resume", "missing.ckpt"]) == 1
    assert "run failed:" in capsys.readouterr().err


def test_test_only_prints_metrics_as_json(tmp_cwd, capsys):
    config = _write(tmp_cwd, GOOD_CONFIG)
    assert main(["--config", config, "--seed", "3"]) == 0
    capsys.readouterr()
    assert main(["--config", config, "--seed", "3", "--test-only"]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) == {"top1"}
    assert 0.0 <= metrics["top1"] <= 1.0


def test_test_only_without_a_checkpoint_fails_at_runtime(tmp_cwd, capsys):
    config = _write(tmp_cwd, GOOD_CONFIG.replace(", ckpt: './student.pt'", ""))
    assert main(["--config", config, "--test-only"]) == 1
    assert "run failed:" in capsys.readouterr().err


def test_unknown_device_fails_at_runtime(tmp_cwd, capsys):
    config = _write(tmp_cwd, GOOD_CONFIG)
    assert main(["--config", config, "--device", "tpu7"]) == 1
    assert "run failed:" in capsys.readouterr().err
