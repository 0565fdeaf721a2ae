"""Engine behavior: determinism, schedules, caching, checkpoints, observers."""

import json
import os
import statistics

import pytest
import torch
from torch import nn

from kdkit.config import build_experiment
from kdkit.engine import evaluate, run_experiment, run_test_only
from kdkit.errors import KDKitError, NonFiniteLossError
from kdkit.logs import LogWriter, parse_log
from kdkit.models import load_ckpt, max_param_diff, parameter_snapshot
from kdkit.registry import default_registry
from kdkit.zoo import make_model

CE_TERM = {"criterion": {"type": "CrossEntropyLoss", "params": {}}, "factor": 1.0}
KD_TERM = {"criterion": {"type": "KDLoss", "params": {"temperature": 1.0, "alpha": 0.5}},
           "factor": 1.0}


def _tree(n=16, val_n=8, image_size=8, batch=8, epochs=1, lr=0.1, org_term=None,
          teacher="tinyresnet_d3", ckpt=None, cache=None, log_freq=None, scheduler=None):
    train = {
        "num_epochs": epochs,
        "train_data_loader": {"dataset_id": "d/train", "random_sample": True,
                              "batch_size": batch},
        "val_data_loader": {"dataset_id": "d/val", "batch_size": batch},
        "optimizer": {"type": "SGD", "params": {"lr": lr}},
        "criterion": {"type": "GeneralizedCustomLoss",
                      "org_term": dict(org_term or CE_TERM), "sub_terms": None},
    }
    if cache is not None:
        train["train_data_loader"]["cache_output"] = cache
    if log_freq is not None:
        train["log_freq"] = log_freq
    if scheduler is not None:
        train["scheduler"] = scheduler
    return {
        "datasets": {"d": {"type": "SyntheticImages", "splits": {
            "train": {"dataset_id": "d/train",
                      "params": {"n": n, "image_size": image_size, "seed": 5}},
            "val": {"dataset_id": "d/val",
                    "params": {"n": val_n, "image_size": image_size, "seed": 5}},
        }}},
        "models": {
            "teacher_model": {"name": teacher, "params": {"num_classes": 10}},
            "student_model": {"name": "tinyresnet_d2", "params": {"num_classes": 10},
                              **({"ckpt": ckpt} if ckpt else {})},
        },
        "train": train,
        "test": {"test_data_loader": {"dataset_id": "d/val", "batch_size": batch}},
    }


class _Recorder:
    """Collects (event, stage_index, epoch) and optional state snapshots."""

    def __init__(self):
        self.events = []
        self.start_params = None
        self.end_params = None
        self.teacher_start = None
        self.teacher_end = None
        self.epoch_states = []

    @staticmethod
    def _params(model):
        return {k: v.detach().clone() for k, v in model.named_parameters()}

    def on_stage_start(self, ctx):
        self.events.append(("start", ctx.stage_index, ctx.epoch))
        self.start_params = self._params(ctx.student_base)
        self.teacher_start = parameter_snapshot(ctx.teacher_base)

    def on_epoch_end(self, ctx):
        self.events.append(("epoch", ctx.stage_index, ctx.epoch))
        self.epoch_states.append(parameter_snapshot(ctx.student_base))

    def on_stage_end(self, ctx):
        self.events.append(("end", ctx.stage_index, ctx.epoch))
        self.end_params = self._params(ctx.student_base)
        self.teacher_end = parameter_snapshot(ctx.teacher_base)


# -- determinism -------------------------------------------------------------------


def test_same_seed_runs_are_bit_identical():
    config = build_experiment(_tree(org_term=KD_TERM))
    first = run_experiment(config, seed=11)
    second = run_experiment(config, seed=11)
    assert first.stages[0].epochs[0].batch_losses == second.stages[0].epochs[0].batch_losses
    assert first.final_metrics == second.final_metrics


def test_different_seeds_change_the_losses():
    config = build_experiment(_tree(org_term=KD_TERM))
    first = run_experiment(config, seed=11)
    second = run_experiment(config, seed=12)
    assert first.stages[0].epochs[0].batch_losses != second.stages[0].epochs[0].batch_losses


# -- evaluate ----------------------------------------------------------------------


class _Echo(nn.Module):
    def forward(self, x):
        return x


class _ModeProbe(nn.Module):
    def __init__(self):
        super().__init__()
        self.seen = []

    def forward(self, x):
        self.seen.append(self.training)
        return torch.zeros(x.shape[0], 10)


def _loader(logits, targets, batch=4):
    return [(logits[i:i + batch], targets[i:i + batch], {})
            for i in range(0, len(targets), batch)]


def test_evaluate_perfect_predictor_scores_one():
    targets = torch.arange(10)
    logits = torch.eye(10)
    got = evaluate(_Echo(), _loader(logits, targets), metrics=("top1", "top5"))
    assert got == {"top1": 1.0, "top5": 1.0}


def test_evaluate_counts_fractions():
    # constant logits favoring classes 0 > 1 > 2 > ...; top1 hits only  the
    # class-0 samples, top3 the samples labeled 0, 1, or 2
    targets = torch.tensor([0, 0, 0, 1, 2, 3, 4, 5, 9, 9])
    logits = torch.arange(10, 0, -1).float().repeat(10, 1)
    got = evaluate(_Echo(), _loader(logits, targets), metrics=("top1", "top3"))
    assert got["top1"] == pytest.approx(3 / 10)
    assert got["top3"] == pytest.approx(5 / 10)


def test_evaluate_switches_to_eval_and_restores_mode():
    model = _ModeProbe().train()
    evaluate(model, _loader(torch.zeros(4, 3), torch.zeros(4, dtype=torch.long)))
    assert model.seen and not any(model.seen)
    assert model.training


def test_evaluate_rejects_unknown_metric():
    with pytest.raises(KDKitError, match="unknown metric"):
        evaluate(_Echo(), [], metrics=("accuracy",))


# -- optimization plumbing ---------------------------------------------------------


def test_zero_lr_leaves_parameters_untouched():
    rec = _Recorder()
    run_experiment(build_experiment(_tree(lr=0.0)), seed=3, observers=(rec,))
    assert max_param_diff(rec.start_params, rec.end_params) == 0.0


def test_teacher_is_never_trained():
    rec = _Recorder()
    run_experiment(build_experiment(_tree(org_term=KD_TERM, epochs=2)), seed=3,
                   observers=(rec,))
    assert max_param_diff(rec.teacher_start, rec.teacher_end) == 0.0


def test_multistep_scheduler_drops_the_lr():
    scheduler = {"type": "MultiStepLR", "params": {"milestones": [2], "gamma": 0.1}}
    report = run_experiment(
        build_experiment(_tree(epochs=3, lr=0.1, scheduler=scheduler)), seed=3)
    lrs = [ep.lr for ep in report.stages[0].epochs]
    assert lrs == pytest.approx([0.1, 0.01, 0.01])


def test_stage_without_trainable_parameters_is_refused():
    tree = _tree()
    tree["train"]["student"] = {"requires_grad": False}
    with pytest.raises(KDKitError, match="no trainable parameters"):
        run_experiment(build_experiment(tree), seed=3)


# -- logging -----------------------------------------------------------------------


def test_log_freq_emits_records_at_step_multiples(tmp_path):
    config = build_experiment(_tree(epochs=2, log_freq=2))  # 2 batches per epoch
    log_path = str(tmp_path / "run.log")
    with LogWriter(log_path) as log:
        run_experiment(config, seed=3, log=log)
    config_text, records = parse_log(open(log_path).read())
    assert config_text is not None
    step_records = [r for r in records if not r.metrics]
    assert [r.step for r in step_records] == [2, 4]
    epoch_records = [r for r in records if r.metrics]
    assert [r.epoch for r in epoch_records] == [1, 2]
    assert all("val_top1" in r.metrics for r in epoch_records)


# -- multi-stage / pruned stages -----------------------------------------------------


def _two_stage_tree():
    tree = _tree(epochs=1)
    hint = {
        "criterion": {"type": "HintLoss", "params": {}},
        "factor": 1.0,
        "student": {"path": "bn1", "io": "output"},
        "teacher": {"path": "layer1", "io": "output"},
        "uses_target": False,
    }
    stage1 = dict(tree["train"])
    stage1["teacher"] = {"sequential": ["conv1", "bn1", "relu", "layer1"],
                         "forward_hook": {"output": ["layer1"]},
                         "requires_grad": False}
    stage1["student"] = {"sequential": ["conv1", "bn1"],
                         "forward_hook": {"output": ["bn1"]},
                         "requires_grad": True}
    stage1["criterion"] = {"type": "GeneralizedCustomLoss", "org_term": None,
                           "sub_terms": {"hint": hint}}
    stage2 = {"criterion": {"type": "GeneralizedCustomLoss", "org_term": dict(CE_TERM),
                            "sub_terms": None},
              "teacher": {"sequential": [], "requires_grad": False},
              "student": {"sequential": [], "requires_grad": True}}
    tree["train"] = {"stage1": stage1, "stage2": stage2}
    return tree


def test_pruned_stage_skips_validation():
    report = run_experiment(build_experiment(_two_stage_tree()), seed=3)
    assert all(ep.val_metrics == {} for ep in report.stages[0].epochs)
    assert all("top1" in ep.val_metrics for ep in report.stages[1].epochs)
    assert report.best_at[0] == 2
    assert report.last_val_metrics() == report.stages[1].epochs[-1].val_metrics


def test_observer_event_order():
    rec = _Recorder()
    run_experiment(build_experiment(_two_stage_tree()), seed=3, observers=(rec,))
    assert rec.events == [
        ("start", 1, 0), ("epoch", 1, 1), ("end", 1, 1),
        ("start", 2, 0), ("epoch", 2, 1), ("end", 2, 1),
    ]


# -- non-finite losses ---------------------------------------------------------------


class _AlwaysNaN:
    def __call__(self, z_S, z_T, y):
        return z_S.sum() * float("nan")


def test_non_finite_loss_names_stage_epoch_step():
    default_registry.register("loss", "AlwaysNaNLoss", _AlwaysNaN)
    try:
        term = {"criterion": {"type": "AlwaysNaNLoss", "params": {}}, "factor": 1.0}
        with pytest.raises(NonFiniteLossError, match=r"\[stage 1 epoch 1 step 1\]"):
            run_experiment(build_experiment(_tree(org_term=term)), seed=3)
    finally:
        default_registry.unregister("loss", "AlwaysNaNLoss")


# -- teacher-output caching -----------------------------------------------------------


def test_cache_is_written_once_then_reused(tmp_path):
    cache_dir = str(tmp_path / "tcache")
    config = build_experiment(_tree(org_term=KD_TERM, epochs=2, cache=cache_dir))
    report = run_experiment(config, seed=3)
    first, second = report.stages[0].epochs
    assert first.cached_batches == 0 and first.teacher_forward_batches == 2
    assert second.cached_batches == 2 and second.teacher_forward_batches == 0
    manifest = json.load(open(os.path.join(cache_dir, "manifest")))
    assert manifest["complete"] is True
    assert manifest["length"] == 16
    blobs = [f for _, _, fs in os.walk(cache_dir) for f in fs if f.endswith(".bin")]
    assert len(blobs) == 16


def test_cache_writing_overhead_stays_small(tmp_path):
    # compute-dominated scale; median of three alternating trials, one warmup
    def wall(cache):
        tree = _tree(n=1024, val_n=64, image_size=48, batch=64, lr=0.05,
                     org_term=KD_TERM, teacher="tinyresnet_d4", cache=cache)
        report = run_experiment(build_experiment(tree), seed=3)
        return report.stages[0].epochs[0].wall_seconds

    wall(None)
    plain, writing = [], []
    for trial in range(3):
        plain.append(wall(None))
        writing.append(wall(str(tmp_path / f"cache{trial}")))
    ratio = statistics.median(writing) / statistics.median(plain)
    assert ratio <= 1.15, f"cache writing cost {ratio:.3f}x an uncached epoch"


# -- checkpoints ----------------------------------------------------------------------


def test_best_and_final_checkpoints(tmp_path):
    # gamma > 1 wrecks epoch 2, so epoch 1 must win
    scheduler = {"type": "MultiStepLR", "params": {"milestones": [1], "gamma": 50.0}}
    ckpt = str(tmp_path / "student.pt")
    tree = _tree(n=256, val_n=64, epochs=2, ckpt=ckpt, scheduler=scheduler)
    rec = _Recorder()
    report = run_experiment(build_experiment(tree), seed=3, observers=(rec,))
    assert report.best_at == (1, 1)

    best = make_model("tinyresnet_d2", {"num_classes": 10})
    load_ckpt(best, ckpt)
    assert max_param_diff(parameter_snapshot(best), rec.epoch_states[0]) == 0.0

    last = make_model("tinyresnet_d2", {"num_classes": 10})
    load_ckpt(last, ckpt + ".final")
    assert max_param_diff(parameter_snapshot(last), rec.epoch_states[1]) == 0.0


def test_resume_starts_from_the_checkpoint(tmp_path):
    ckpt = str(tmp_path / "student.pt")
    run_experiment(build_experiment(_tree(ckpt=ckpt)), seed=3)

    saved = make_model("tinyresnet_d2", {"num_classes": 10})
    load_ckpt(saved, ckpt + ".final")
    rec = _Recorder()
    run_experiment(build_experiment(_tree()), seed=4, observers=(rec,),
                   resume_ckpt=ckpt + ".final")
    saved_params = {k: v.detach().clone() for k, v in saved.named_parameters()}
    assert max_param_diff(saved_params, rec.start_params) == 0.0


def test_run_test_only_matches_final_eval(tmp_path):
    ckpt = str(tmp_path / "student.pt")
    config = build_experiment(_tree(ckpt=ckpt))
    report = run_experiment(config, seed=3)
    assert run_test_only(config, seed=3) == report.final_metrics


def test_run_test_only_requires_a_ckpt():
    config = build_experiment(_tree())
    with pytest.raises(KDKitError, match="checkpoint"):
        run_test_only(config, seed=3)


# -- odds and ends --------------------------------------------------------------------


def test_wrapper_components_are_identity_passthroughs():
    model = nn.Linear(2, 2)
    with pytest.warns(UserWarning, match="accepted but ignored"):
        wrapped = default_registry.instantiate("wrapper", "DataParallel", {"model": model})
    assert wrapped is model


def test_summary_tree_is_json_serializable():
    report = run_experiment(build_experiment(_tree()), seed=3)
    tree = json.loads(json.dumps(report.summary_tree()))
    epoch = tree["stages"][0]["epochs"][0]
    assert {"epoch", "mean_loss", "lr", "val_metrics", "wall_seconds"} <= set(epoch)
    assert tree["best_metric"] == report.best_metric
