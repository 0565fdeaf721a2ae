"""Experiment execution: builds each stage from a resolved config, runs the
epoch loops with teacher-output caching, evaluates, logs, and checkpoints.

A run is deterministic given (config, seed): model init, shuffling, and
stochastic transforms all draw from streams derived from the one seed, and
data loading is single-threaded.
"""

from __future__ import annotations

import copy
import os
import time
import warnings
from dataclasses import dataclass, field

import torch

from .config import ExperimentConfig, ResolvedStage, emit
from .data import BatchLoader, CacheStore, build_transform, teacher_fingerprint, wrap_dataset
from .errors import CacheMissError, KDKitError, NonFiniteLossError
from .hooks import attach
from .logs import LogRecord, LogWriter
from .losses import GeneralizedCustomLoss
from .models import build_special, freeze, load_ckpt, redesign, save_ckpt
from .registry import (
    Registry,
    default_registry,
    register_optimizer,
    register_scheduler,
    register_wrapper,
)
from .utils import derive_seed, seed_everything

MODEL_OUTPUT_KEY = "output:."


# --- built-in optimizers / schedulers / wrappers -----------------------------------

@register_optimizer("SGD")
def _sgd(params, lr=0.1, momentum=0.0, weight_decay=0.0, nesterov=False):
    return torch.optim.SGD(params, lr=lr, momentum=momentum,
                           weight_decay=weight_decay, nesterov=nesterov)


@register_optimizer("Adam")
def _adam(params, lr=1e-3, betas=(0.9, 0.999), weight_decay=0.0):
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas), weight_decay=weight_decay)


@register_optimizer("AdamW")
def _adamw(params, lr=1e-3, betas=(0.9, 0.999), weight_decay=1e-2):
    return torch.optim.AdamW(params, lr=lr, betas=tuple(betas), weight_decay=weight_decay)


@register_scheduler("MultiStepLR")
def _multistep(optimizer, milestones, gamma=0.1):
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=list(milestones), gamma=gamma)


@register_scheduler("StepLR")
def _steplr(optimizer, step_size, gamma=0.1):
    return torch.optim.lr_scheduler.StepLR(optimizer, step_size=step_size, gamma=gamma)


@register_scheduler("CosineAnnealingLR")
def _cosine(optimizer, T_max, eta_min=0.0):
    return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=T_max, eta_min=eta_min)


def _identity_wrapper(name):
    def wrap(model, **params):
        warnings.warn(f"wrapper '{name}' accepted but ignored: single-process training")
        return model
    return wrap


for _name in ("DistributedDataParallel", "DataParallel"):
    default_registry.register("wrapper", _name, _identity_wrapper(_name),
                              builtin=True, noop=True)


# --- reports ------------------------------------------------------------------------

@dataclass
class TrainState:
    stage_index: int = 0
    epoch: int = 0
    global_step: int = 0
    best_metric: float | None = None
    rng_seed: int = 0
    phase_seconds: dict = field(default_factory=dict)


@dataclass
class EpochReport:
    stage: int
    epoch: int
    batch_losses: list
    lr: float
    val_metrics: dict
    phase_seconds: dict
    wall_seconds: float
    teacher_forward_batches: int
    cached_batches: int

    @property
    def mean_loss(self) -> float:
        return sum(self.batch_losses) / len(self.batch_losses) if self.batch_losses else 0.0


@dataclass
class StageReport:
    stage: int
    epochs: list


@dataclass
class ExperimentReport:
    stages: list
    best_metric: float | None
    best_at: tuple | None  # (stage, epoch)
    final_metrics: dict
    resolved_config_text: str

    def last_val_metrics(self) -> dict:
        for stage in reversed(self.stages):
            for ep in reversed(stage.epochs):
                if ep.val_metrics:
                    return ep.val_metrics
        return {}

    def summary_tree(self) -> dict:
        return {
            "best_metric": self.best_metric,
            "best_at": list(self.best_at) if self.best_at else None,
            "final_metrics": dict(self.final_metrics),
            "stages": [
                {
                    "stage": s.stage,
                    "epochs": [
                        {
                            "epoch": e.epoch,
                            "mean_loss": e.mean_loss,
                            "lr": e.lr,
                            "val_metrics": dict(e.val_metrics),
                            "phase_seconds": {k: round(v, 6) for k, v in e.phase_seconds.items()},
                            "wall_seconds": round(e.wall_seconds, 6),
                            "teacher_forward_batches": e.teacher_forward_batches,
                            "cached_batches": e.cached_batches,
                        }
                        for e in s.epochs
                    ],
                }
                for s in self.stages
            ],
        }


class StageContext:
    """Live view of one stage's components, handed to observers."""

    def __init__(self, **kw):
        self.__dict__.update(kw)


def _notify(observers, event: str, ctx) -> None:
    for obs in observers:
        fn = getattr(obs, event, None)
        if fn is not None:
            fn(ctx)


# --- evaluation -----------------------------------------------------------------------

def _topk_from_name(name: str) -> int:
    if name == "top1":
        return 1
    if name.startswith("top") and name[3:].isdigit():
        return int(name[3:])
    raise KDKitError(f"unknown metric '{name}'")


def evaluate(model, loader, metrics=("top1",)) -> dict:
    """Accuracy metrics over the full loader; topN = fraction of samples whose
    target is among the N highest logits."""
    ks = {m: _topk_from_name(m) for m in metrics}
    was_training = model.training
    model.eval()
    correct = {m: 0 for m in metrics}
    total = 0
    with torch.no_grad():
        for inputs, targets, _ in loader:
            out = model(inputs)
            total += targets.shape[0]
            for m, k in ks.items():
                if k == 1:
                    correct[m] += int((out.argmax(dim=1) == targets).sum())
                else:
                    topk = out.topk(min(k, out.shape[1]), dim=1).indices
                    correct[m] += int((topk == targets.unsqueeze(1)).any(dim=1).sum())
    model.train(was_training)
    return {m: correct[m] / max(total, 1) for m in metrics}


# --- experiment ------------------------------------------------------------------------

def _build_stage_dataset(config: ExperimentConfig, dataset_id: str, transform_seed: int,
                         registry: Registry):
    spec = config.datasets[dataset_id]
    pipeline = build_transform(spec.transform, registry)
    pipeline.reseed(transform_seed)
    params = dict(spec.params)
    params["transform"] = pipeline
    return registry.instantiate("dataset", spec.type, params)


def _trainable_params(*modules):
    seen = set()
    out = []
    for mod in modules:
        for p in mod.parameters():
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


def _annotate(exc: Exception, stage: int, epoch: int, step: int) -> Exception:
    note = f"[stage {stage} epoch {epoch} step {step}]"
    exc.args = (f"{note} {exc.args[0]}" if exc.args else note,) + exc.args[1:]
    return exc


def run_experiment(config: ExperimentConfig, seed: int = 42, device: str = "cpu",
                   log: LogWriter | None = None, registry: Registry | None = None,
                   observers=(), resume_ckpt: str | None = None) -> ExperimentReport:
    """Execute every stage of a validated config under one seed.

    The student checkpoint path is an output (best weights; '<path>.final'
    gets the last state); it is read only through resume_ckpt or test-only
    evaluation, so rerunning a config never depends on earlier runs.
    """
    registry = registry or default_registry
    resolved_text = emit(config.to_tree())
    if log is not None:
        log.write_header(resolved_text)

    seed_everything(derive_seed(seed, "run"))
    state = TrainState(rng_seed=seed)

    torch.manual_seed(derive_seed(seed, "model-init", "teacher"))
    teacher_base = registry.instantiate("model", config.teacher.name, dict(config.teacher.params))
    torch.manual_seed(derive_seed(seed, "model-init", "student"))
    student_base = registry.instantiate("model", config.student.name, dict(config.student.params))
    if config.teacher.ckpt:
        load_ckpt(teacher_base, config.teacher.ckpt,
                  pretrained_fallback=bool(config.teacher.params.get("pretrained")))
    if resume_ckpt:
        load_ckpt(student_base, resume_ckpt)
    teacher_base.to(device)
    student_base.to(device)

    aux_pool = {"teacher": {}, "student": {}}
    # snapshotted inside the epoch loop: end-of-stage weights are not the
    # best-epoch weights once training keeps going
    best = {"metric": None, "at": None, "state": None}
    metric_names = tuple(config.test.metrics)
    stage_reports = []

    for stage_idx, stage in enumerate(config.stages, 1):
        state.stage_index = stage_idx
        report = _run_stage(
            config, stage, stage_idx, seed, device, registry, log, observers, state,
            teacher_base, student_base, aux_pool, metric_names, best,
        )
        stage_reports.append(report)
        state.best_metric = best["metric"]

    if config.student.ckpt:
        save_ckpt(student_base, config.student.ckpt + ".final")
        if best["state"] is not None:
            current = copy.deepcopy(student_base.state_dict())
            student_base.load_state_dict(best["state"])
            save_ckpt(student_base, config.student.ckpt)
            student_base.load_state_dict(current)
        else:
            save_ckpt(student_base, config.student.ckpt)

    test_ds = _build_stage_dataset(config, config.test.loader.dataset_id,
                                   derive_seed(seed, "transform", "test"), registry)
    test_loader = BatchLoader(wrap_dataset(test_ds), config.test.loader.batch_size,
                              shuffle=False, num_workers=config.test.loader.num_workers)
    final_metrics = evaluate(student_base, test_loader, metric_names)
    if log is not None:
        log.text(f"final test metrics: { {k: round(v, 6) for k, v in final_metrics.items()} }")
        log.flush()

    return ExperimentReport(
        stages=stage_reports, best_metric=best["metric"], best_at=best["at"],
        final_metrics=final_metrics, resolved_config_text=resolved_text,
    )


def _run_stage(config, stage: ResolvedStage, stage_idx: int, seed: int, device: str,
               registry: Registry, log, observers, state: TrainState,
               teacher_base, student_base, aux_pool, metric_names, best) -> StageReport:
    train_ds = _build_stage_dataset(config, stage.train_loader.dataset_id,
                                    derive_seed(seed, "transform", stage_idx, "train"), registry)
    val_ds = _build_stage_dataset(config, stage.val_loader.dataset_id,
                                  derive_seed(seed, "transform", stage_idx, "val"), registry)
    caching = stage.train_loader.cache_output is not None
    train_wrapped = wrap_dataset(train_ds, attach_index=caching)
    train_loader = BatchLoader(train_wrapped, stage.train_loader.batch_size,
                               shuffle=stage.train_loader.shuffle,
                               num_workers=stage.train_loader.num_workers)
    val_loader = BatchLoader(wrap_dataset(val_ds), stage.val_loader.batch_size, shuffle=False)

    sample_shape = train_ds[0][0].shape
    example = torch.zeros((2, *sample_shape), device=device)

    teacher_model = redesign(teacher_base, stage.teacher.sequential
                             if stage.teacher.sequential == "empty"
                             else list(stage.teacher.sequential), example)
    student_model = redesign(student_base, stage.student.sequential
                             if stage.student.sequential == "empty"
                             else list(stage.student.sequential), example)

    teacher_handles, io_T = attach(teacher_model, stage.teacher.hook_paths(), detach=True)
    student_handles, io_S = attach(student_model, stage.student.hook_paths(), detach=False)

    freeze(teacher_model, stage.teacher.frozen_modules, stage.teacher.requires_grad)
    freeze(student_model, stage.student.frozen_modules, stage.student.requires_grad)
    teacher_model.eval()
    student_model.train()

    teacher_special = build_special(teacher_model, io_T, stage.teacher.auxiliaries,
                                    registry, aux_pool["teacher"], inference_only_base=True)
    student_special = build_special(student_model, io_S, stage.student.auxiliaries,
                                    registry, aux_pool["student"], inference_only_base=False)
    for side, special, specs in (("teacher", teacher_special, stage.teacher.auxiliaries),
                                 ("student", student_special, stage.student.auxiliaries)):
        for spec in specs:
            mod = special.auxiliaries[spec.name]
            mod.to(device)
            for p in mod.parameters():
                p.requires_grad_(spec.trainable)
            mod.train(spec.trainable)

    params = _trainable_params(student_special, teacher_special)
    if not params:
        raise KDKitError(f"stage {stage_idx} has no trainable parameters")
    optimizer = registry.instantiate("optimizer", stage.optimizer.type,
                                     {"params": params, **stage.optimizer.params})
    scheduler = None
    step_wise = False
    if stage.scheduler is not None:
        scheduler = registry.instantiate("scheduler", stage.scheduler.type,
                                         {"optimizer": optimizer, **stage.scheduler.params})
        step_wise = bool(registry.metadata("scheduler", stage.scheduler.type).get("step_wise"))
    criterion = GeneralizedCustomLoss(stage.criterion, registry)

    cache = None
    teacher_capture_keys = [f"{side}:{path}" for path, side in stage.teacher.hook_paths()]
    teacher_capture_keys.append(MODEL_OUTPUT_KEY)
    if caching:
        fp = teacher_fingerprint(config.teacher.name, config.teacher.ckpt, teacher_capture_keys)
        fp["sequential"] = (stage.teacher.sequential if stage.teacher.sequential == "empty"
                            else list(stage.teacher.sequential))
        cache = CacheStore(stage.train_loader.cache_output, len(train_wrapped), fp)

    forward_counter = {"n": 0}

    def _count_teacher_forward(module, args):
        forward_counter["n"] += 1

    counter_handle = teacher_model.register_forward_pre_hook(_count_teacher_forward)

    # student quality is only measurable when the stage trains the full model
    student_evaluable = stage.student.sequential == () or stage.student.sequential == []
    ctx = StageContext(
        stage_index=stage_idx, stage=stage, teacher_base=teacher_base,
        student_base=student_base, teacher_model=teacher_model, student_model=student_model,
        teacher_special=teacher_special, student_special=student_special,
        io_T=io_T, io_S=io_S, optimizer=optimizer, scheduler=scheduler,
        criterion=criterion, train_loader=train_loader, val_loader=val_loader,
        cache=cache, epoch=0,
    )
    _notify(observers, "on_stage_start", ctx)

    epochs = []
    try:
        for epoch in range(1, stage.num_epochs + 1):
            state.epoch = epoch
            ctx.epoch = epoch
            ep_report = _train_epoch(
                stage, stage_idx, epoch, seed, device, state, log,
                train_loader, teacher_special, student_special, io_T, io_S,
                criterion, optimizer, scheduler if step_wise else None, cache,
                teacher_capture_keys, forward_counter,
            )
            if scheduler is not None and not step_wise:
                scheduler.step()
            ep_report.lr = optimizer.param_groups[0]["lr"]
            if student_evaluable:
                ep_report.val_metrics = evaluate(student_model, val_loader, metric_names)
                metric = ep_report.val_metrics.get(metric_names[0])
                if metric is not None and (best["metric"] is None or metric > best["metric"]):
                    best.update(metric=metric, at=(stage_idx, epoch),
                                state=copy.deepcopy(student_base.state_dict()))
            if log is not None:
                log.record(LogRecord(stage=stage_idx, epoch=epoch, step=state.global_step,
                                     loss=ep_report.mean_loss, lr=ep_report.lr,
                                     metrics={f"val_{k}": v
                                              for k, v in ep_report.val_metrics.items()}))
                log.flush()
            epochs.append(ep_report)
            _notify(observers, "on_epoch_end", ctx)
    finally:
        counter_handle.remove()
        teacher_handles.remove()
        student_handles.remove()
        if cache is not None:
            cache.close()
    _notify(observers, "on_stage_end", ctx)
    return StageReport(stage=stage_idx, epochs=epochs)


def _train_epoch(stage, stage_idx: int, epoch: int, seed: int, device: str,
                 state: TrainState, log, train_loader, teacher_special, student_special,
                 io_T, io_S, criterion, optimizer, step_scheduler, cache,
                 teacher_capture_keys, forward_counter) -> EpochReport:
    train_loader.set_epoch_seed(derive_seed(seed, "shuffle", stage_idx, epoch))
    phase = {"data": 0.0, "teacher": 0.0, "student": 0.0, "loss": 0.0,
             "backward": 0.0, "step": 0.0}
    batch_losses = []
    cached_batches = 0
    forwards_before = forward_counter["n"]
    epoch_start = time.perf_counter()
    writing_cache = cache is not None and not cache.complete

    it = iter(train_loader)
    while True:
        t0 = time.perf_counter()
        batch = next(it, None)
        phase["data"] += time.perf_counter() - t0
        if batch is None:
            break
        inputs, targets, supp = batch
        inputs = inputs.to(device)
        targets = targets.to(device)
        indices = supp["sample_index"].tolist() if "sample_index" in supp else None

        t0 = time.perf_counter()
        payload = None
        if cache is not None and cache.complete and indices is not None:
            try:
                payload = cache.get_batch(indices)
            except CacheMissError:
                payload = None
        if payload is not None:
            io_T.begin_forward()
            for key in teacher_capture_keys:
                side, _, path = key.partition(":")
                io_T.put(path, side, payload[key].to(device))
            teacher_special.post_forward(io_T)
            cached_batches += 1
        else:
            teacher_special(inputs)
            if cache is not None and indices is not None and (writing_cache or cache.complete):
                # cache.complete here means a get_batch miss: re-put the batch
                batch_values = {}
                for key in teacher_capture_keys:
                    side, _, path = key.partition(":")
                    value = io_T.get(path, side)
                    if not torch.is_tensor(value):
                        raise KDKitError(
                            f"cannot cache non-tensor capture '{key}' "
                            f"({type(value).__name__}); cache only tensor captures")
                    batch_values[key] = value.detach().cpu()
                for j, sample_index in enumerate(indices):
                    cache.put(sample_index, {k: v[j] for k, v in batch_values.items()})
        phase["teacher"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        student_special(inputs)
        phase["student"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        try:
            loss = criterion(io_S, io_T, targets)
        except NonFiniteLossError as exc:
            raise _annotate(exc, stage_idx, epoch, state.global_step + 1)
        phase["loss"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        phase["backward"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        optimizer.step()
        if step_scheduler is not None:
            step_scheduler.step()
        phase["step"] += time.perf_counter() - t0

        state.global_step += 1
        batch_losses.append(float(loss.detach()))
        if stage.log_freq > 0 and state.global_step % stage.log_freq == 0 and log is not None:
            log.record(LogRecord(stage=stage_idx, epoch=epoch, step=state.global_step,
                                 loss=batch_losses[-1], lr=optimizer.param_groups[0]["lr"]))

    if writing_cache:
        cache.mark_complete()
    for k, v in phase.items():
        state.phase_seconds[k] = state.phase_seconds.get(k, 0.0) + v
    return EpochReport(
        stage=stage_idx, epoch=epoch, batch_losses=batch_losses,
        lr=optimizer.param_groups[0]["lr"], val_metrics={}, phase_seconds=phase,
        wall_seconds=time.perf_counter() - epoch_start,
        teacher_forward_batches=forward_counter["n"] - forwards_before,
        cached_batches=cached_batches,
    )


def run_test_only(config: ExperimentConfig, seed: int = 42, device: str = "cpu",
                  ckpt_path: str | None = None, registry: Registry | None = None) -> dict:
    """Evaluate the student checkpoint on the test split without training."""
    registry = registry or default_registry
    seed_everything(derive_seed(seed, "run"))
    torch.manual_seed(derive_seed(seed, "model-init", "student"))
    student = registry.instantiate("model", config.student.name, dict(config.student.params))
    path = ckpt_path or config.student.ckpt
    if not path:
        raise KDKitError("test-only evaluation needs a student checkpoint path")
    load_ckpt(student, path)
    student.to(device)
    test_ds = _build_stage_dataset(config, config.test.loader.dataset_id,
                                   derive_seed(seed, "transform", "test"), registry)
    loader = BatchLoader(wrap_dataset(test_ds), config.test.loader.batch_size, shuffle=False)
    return evaluate(student, loader, tuple(config.test.metrics))
