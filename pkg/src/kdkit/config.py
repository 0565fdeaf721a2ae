"""Declarative experiment configuration: parsing, validation, stage resolution.

A config file is YAML-compatible text with three main sections, ``datasets``,
``models`` (teacher_model / student_model) and ``train``, plus ``test``.
Anchors/aliases and the ``!join`` string-concatenation tag are supported;
after parsing, aliased nodes are independent copies, never shared objects.

Multi-stage training is declared with ``stage1``, ``stage2``, ... keys under
``train``; a stage omits any top-level field it wants to reuse from the
resolved previous stage (per-field inheritance, no deep merging). A single
implicit stage may instead put the stage fields directly under ``train``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import yaml

from .errors import (
    ConfigSyntaxError,
    IncompleteStageError,
    JoinTypeError,
    UnknownComponentError,
    UnresolvedAliasError,
    ValidationError,
)
from .registry import Registry, default_registry

DEFAULT_LOG_FREQ = 100

_STAGE_FIELDS = (
    "num_epochs",
    "train_data_loader",
    "val_data_loader",
    "teacher",
    "student",
    "optimizer",
    "scheduler",
    "criterion",
    "log_freq",
)
_REQUIRED_STAGE_FIELDS = (
    "num_epochs",
    "train_data_loader",
    "val_data_loader",
    "optimizer",
    "criterion",
)
# accepted for compatibility with large-scale configs, ignored at desk scale
_IGNORED_STAGE_KEYS = ("apex", "grad_accum_step", "max_grad_norm")


# --- parsing ----------------------------------------------------------------

def join_tag(parts: list) -> str:
    """Concatenate scalar parts with no separator.

    Numbers use their shortest round-trip decimal form; mappings and lists
    are rejected.
    """
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(p)
        elif isinstance(p, bool) or not isinstance(p, (int, float)):
            raise JoinTypeError(f"!join elements must be scalars, got {type(p).__name__}: {p!r}")
        else:
            out.append(repr(p))
    return "".join(out)


class _ConfigLoader(yaml.SafeLoader):
    pass


def _construct_join(loader: _ConfigLoader, node: yaml.Node) -> str:
    if not isinstance(node, yaml.SequenceNode):
        raise JoinTypeError("!join expects a sequence of scalars")
    return join_tag(loader.construct_sequence(node, deep=True))


_ConfigLoader.add_constructor("!join", _construct_join)


def _decouple(node):
    # Rebuild containers so aliased nodes become value-equal copies rather
    # than shared objects (deliberately NOT deepcopy, which preserves sharing).
    if isinstance(node, dict):
        return {k: _decouple(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_decouple(v) for v in node]
    return node


def parse_config(text: str) -> dict:
    """Parse config text into a plain tree with aliases and !join resolved."""
    try:
        tree = yaml.load(text, Loader=_ConfigLoader)
    except yaml.composer.ComposerError as exc:
        mark = exc.problem_mark
        problem = exc.problem or ""
        if "undefined alias" in problem:
            anchor = problem.split("undefined alias")[-1].strip().strip("'\"")
            raise UnresolvedAliasError(
                anchor,
                None if mark is None else mark.line + 1,
                None if mark is None else mark.column + 1,
            ) from exc
        raise ConfigSyntaxError(
            problem or str(exc),
            None if mark is None else mark.line + 1,
            None if mark is None else mark.column + 1,
        ) from exc
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigSyntaxError(
            exc.problem or str(exc),
            None if mark is None else mark.line + 1,
            None if mark is None else mark.column + 1,
        ) from exc
    except yaml.YAMLError as exc:
        raise ConfigSyntaxError(str(exc)) from exc
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigSyntaxError("top level of a config must be a mapping")
    return _decouple(tree)


def emit(tree: dict) -> str:
    """Canonical serializer: stable key order, no anchors, round-trips."""
    return yaml.safe_dump(tree, sort_keys=False, default_flow_style=False, width=100)


# --- resolved structures ------------------------------------------------------

@dataclass(frozen=True)
class Binding:
    """Where a loss-term operand comes from: one model's I/O dictionary."""

    model: str  # 'student' or 'teacher'
    path: str | None = None
    paths: tuple[str, ...] | None = None
    io: str = "output"
    index: int | None = None

    def to_tree(self) -> dict:
        t: dict = {"model": self.model}
        if self.paths is not None:
            t["paths"] = list(self.paths)
        else:
            t["path"] = self.path
        t["io"] = self.io
        if self.index is not None:
            t["index"] = self.index
        return t


@dataclass(frozen=True)
class LossTerm:
    name: str
    criterion_type: str
    criterion_params: dict
    factor: float
    student_binding: Binding | None = None  # None only for the org term
    teacher_binding: Binding | None = None
    uses_target: bool = True

    def to_tree(self) -> dict:
        t: dict = {
            "criterion": {"type": self.criterion_type, "params": dict(self.criterion_params)},
            "factor": self.factor,
        }
        if self.student_binding is not None:
            t["student"] = self.student_binding.to_tree()
        if self.teacher_binding is not None:
            t["teacher"] = self.teacher_binding.to_tree()
        if not self.uses_target:
            t["uses_target"] = False
        return t


@dataclass(frozen=True)
class CriterionSpec:
    """The composite (generalized customizable) loss declaration."""

    type: str
    org_term: LossTerm | None
    sub_terms: tuple[LossTerm, ...]

    def to_tree(self) -> dict:
        return {
            "type": self.type,
            "org_term": None if self.org_term is None else self.org_term.to_tree(),
            "sub_terms": {t.name: t.to_tree() for t in self.sub_terms} or None,
        }


@dataclass(frozen=True)
class AuxiliarySpec:
    name: str
    type: str
    params: dict
    input_binding: Binding
    trainable: bool = True

    def to_tree(self) -> dict:
        return {
            "type": self.type,
            "params": dict(self.params),
            "input": self.input_binding.to_tree(),
            "trainable": self.trainable,
        }


@dataclass(frozen=True)
class ModelStageSetup:
    """Per-stage overrides applied to one model (Appendix-B ``teacher:`` block)."""

    sequential: tuple[str, ...] | str = ()  # () = unaltered, 'empty' = no-op model
    frozen_modules: tuple[str, ...] = ()
    requires_grad: bool = True
    wrapper: str = "none"
    forward_hook: dict = field(default_factory=dict)  # {'input': [...], 'output': [...]}
    auxiliaries: tuple[AuxiliarySpec, ...] = ()

    def hook_paths(self) -> list[tuple[str, str]]:
        pairs = []
        for side in ("input", "output"):
            for p in self.forward_hook.get(side, []) or []:
                pairs.append((p, side))
        return pairs

    def to_tree(self) -> dict:
        t: dict = {
            "sequential": list(self.sequential) if self.sequential != "empty" else "empty",
            "frozen_modules": list(self.frozen_modules),
            "requires_grad": self.requires_grad,
            "wrapper": self.wrapper,
        }
        if self.forward_hook:
            t["forward_hook"] = {k: list(v) for k, v in self.forward_hook.items()}
        if self.auxiliaries:
            t["auxiliaries"] = {a.name: a.to_tree() for a in self.auxiliaries}
        return t


@dataclass(frozen=True)
class LoaderSpec:
    dataset_id: str
    batch_size: int
    shuffle: bool = False
    num_workers: int = 0
    cache_output: str | None = None

    def to_tree(self) -> dict:
        t: dict = {
            "dataset_id": self.dataset_id,
            "random_sample": self.shuffle,
            "batch_size": self.batch_size,
            "num_workers": self.num_workers,
        }
        if self.cache_output is not None:
            t["cache_output"] = self.cache_output
        return t


@dataclass(frozen=True)
class ComponentSpec:
    type: str
    params: dict

    def to_tree(self) -> dict:
        return {"type": self.type, "params": dict(self.params)}


@dataclass(frozen=True)
class ResolvedStage:
    num_epochs: int
    train_loader: LoaderSpec
    val_loader: LoaderSpec
    teacher: ModelStageSetup
    student: ModelStageSetup
    optimizer: ComponentSpec
    scheduler: ComponentSpec | None
    criterion: CriterionSpec
    log_freq: int

    def to_tree(self) -> dict:
        t = {
            "num_epochs": self.num_epochs,
            "log_freq": self.log_freq,
            "train_data_loader": self.train_loader.to_tree(),
            "val_data_loader": self.val_loader.to_tree(),
            "teacher": self.teacher.to_tree(),
            "student": self.student.to_tree(),
            "optimizer": self.optimizer.to_tree(),
            "scheduler": None if self.scheduler is None else self.scheduler.to_tree(),
            "criterion": self.criterion.to_tree(),
        }
        return t


@dataclass(frozen=True)
class DatasetSpec:
    dataset_id: str
    type: str
    params: dict
    transform: tuple = ()  # ordered ({'type':..., 'params':...}, ...)

    def to_tree(self) -> dict:
        params = dict(self.params)
        params["transform_params"] = [
            {"type": s["type"], "params": dict(s.get("params") or {})} for s in self.transform
        ]
        return {"dataset_id": self.dataset_id, "params": params}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    params: dict
    ckpt: str | None = None

    def to_tree(self) -> dict:
        return {"name": self.name, "params": dict(self.params), "ckpt": self.ckpt}


@dataclass(frozen=True)
class TestSpec:
    loader: LoaderSpec
    metrics: tuple[str, ...] = ("top1",)

    def to_tree(self) -> dict:
        return {"test_data_loader": self.loader.to_tree(), "metrics": list(self.metrics)}


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: dict  # dataset_id -> DatasetSpec
    teacher: ModelSpec
    student: ModelSpec
    stages: tuple[ResolvedStage, ...]
    test: TestSpec

    def to_tree(self) -> dict:
        """Canonical tree: re-parsing and re-building it yields an equal config."""
        grouped: dict = {}
        for ds in self.datasets.values():
            name, _, split = ds.dataset_id.partition("/")
            grouped.setdefault(name, {"type": ds.type, "splits": {}})
            grouped[name]["splits"][split or "all"] = ds.to_tree()
        train = {f"stage{i}": s.to_tree() for i, s in enumerate(self.stages, 1)}
        return {
            "datasets": grouped,
            "models": {
                "teacher_model": self.teacher.to_tree(),
                "student_model": self.student.to_tree(),
            },
            "train": train,
            "test": self.test.to_tree(),
        }


# --- stage resolution ---------------------------------------------------------

def resolve_stage(raw_stages: list[dict], k: int, resolved_prev: ResolvedStage | None,
                  problems: list[str] | None = None) -> ResolvedStage:
    """Resolve stage ``k`` (1-based) with per-field inheritance from stage k-1.

    A field absent from stage k inherits the previous *resolved* value; an
    explicit null clears optional fields (scheduler). Stage 1 must be complete
    after defaults, else IncompleteStageError.
    """
    raw = raw_stages[k - 1]
    merged: dict = {}
    for f in _STAGE_FIELDS:
        if f in raw:
            merged[f] = raw[f]
        elif resolved_prev is not None:
            merged[f] = _resolved_field_tree(resolved_prev, f)
    if "log_freq" not in merged or merged["log_freq"] is None:
        merged["log_freq"] = DEFAULT_LOG_FREQ
    merged.setdefault("teacher", {"requires_grad": False})
    merged.setdefault("student", {"requires_grad": True})
    merged.setdefault("scheduler", None)

    missing = [f for f in _REQUIRED_STAGE_FIELDS if merged.get(f) is None]
    if missing:
        raise IncompleteStageError(
            f"stage {k} is missing required fields after defaults/inheritance: {missing}"
        )
    local: list[str] = [] if problems is None else problems
    stage = ResolvedStage(
        num_epochs=int(merged["num_epochs"]),
        train_loader=_parse_loader(merged["train_data_loader"], f"stage {k} train_data_loader", local),
        val_loader=_parse_loader(merged["val_data_loader"], f"stage {k} val_data_loader", local),
        teacher=_parse_model_setup(merged["teacher"] or {}, default_requires_grad=False,
                                   where=f"stage {k} teacher", problems=local),
        student=_parse_model_setup(merged["student"] or {}, default_requires_grad=True,
                                   where=f"stage {k} student", problems=local),
        optimizer=_parse_component(merged["optimizer"], f"stage {k} optimizer", local),
        scheduler=None if merged.get("scheduler") is None
        else _parse_component(merged["scheduler"], f"stage {k} scheduler", local),
        criterion=_parse_criterion(merged["criterion"], f"stage {k} criterion", local),
        log_freq=int(merged["log_freq"]),
    )
    if problems is None and local:
        raise ValidationError(local)
    return stage


def _resolved_field_tree(prev: ResolvedStage, f: str):
    # inheritance works on the canonical tree form so explicit values and
    # inherited values take an identical parsing path
    tree = prev.to_tree()
    key = {"train_data_loader": "train_data_loader", "val_data_loader": "val_data_loader"}.get(f, f)
    return tree[key]


# --- section parsers ----------------------------------------------------------

def _parse_loader(node, where: str, problems: list[str]) -> LoaderSpec:
    if not isinstance(node, dict):
        problems.append(f"{where}: expected a mapping")
        return LoaderSpec(dataset_id="", batch_size=1)
    if "dataset_id" not in node:
        problems.append(f"{where}: missing dataset_id")
    batch_size = node.get("batch_size", 1)
    if not isinstance(batch_size, int) or batch_size < 1:
        problems.append(f"{where}: batch_size must be an integer >= 1, got {batch_size!r}")
        batch_size = 1
    return LoaderSpec(
        dataset_id=str(node.get("dataset_id", "")),
        batch_size=batch_size,
        shuffle=bool(node.get("random_sample", node.get("shuffle", False))),
        num_workers=int(node.get("num_workers", 0) or 0),
        cache_output=node.get("cache_output") or None,
    )


def _parse_binding(node, default_model: str, where: str, problems: list[str]) -> Binding:
    if not isinstance(node, dict):
        problems.append(f"{where}: binding must be a mapping with a 'path' (or 'paths')")
        return Binding(model=default_model, path="")
    if ("path" in node) == ("paths" in node):
        problems.append(f"{where}: binding needs exactly one of 'path' or 'paths'")
    io = node.get("io", "output")
    if io not in ("input", "output"):
        problems.append(f"{where}: io must be 'input' or 'output', got {io!r}")
        io = "output"
    model = node.get("model", default_model)
    if model not in ("student", "teacher"):
        problems.append(f"{where}: model must be 'student' or 'teacher', got {model!r}")
        model = default_model
    return Binding(
        model=model,
        path=node.get("path"),
        paths=tuple(node["paths"]) if "paths" in node else None,
        io=io,
        index=node.get("index"),
    )


def _parse_term(name: str, node, where: str, problems: list[str], org: bool) -> LossTerm | None:
    if not isinstance(node, dict) or not isinstance(node.get("criterion"), dict):
        problems.append(f"{where}: expected a mapping with 'criterion' and 'factor'")
        return None
    crit = node["criterion"]
    factor = node.get("factor", 1.0)
    if not isinstance(factor, (int, float)) or isinstance(factor, bool) or factor < 0:
        problems.append(f"{where}: factor (balancing weight) must be a number >= 0")
        factor = 0.0
    student = teacher = None
    if not org:
        student = _parse_binding(node.get("student"), "student", f"{where}.student", problems) \
            if "student" in node else None
        teacher = _parse_binding(node.get("teacher"), "teacher", f"{where}.teacher", problems) \
            if "teacher" in node else None
        if student is None and teacher is None:
            problems.append(f"{where}: a sub-term needs a 'student' and/or 'teacher' binding")
    return LossTerm(
        name=name,
        criterion_type=str(crit.get("type", "")),
        criterion_params=dict(crit.get("params") or {}),
        factor=float(factor),
        student_binding=student,
        teacher_binding=teacher,
        uses_target=bool(node.get("uses_target", True)),
    )


def _parse_criterion(node, where: str, problems: list[str]) -> CriterionSpec:
    if not isinstance(node, dict) or "type" not in node:
        problems.append(f"{where}: expected a mapping with a 'type'")
        return CriterionSpec(type="", org_term=None, sub_terms=())
    org = None
    if node.get("org_term"):
        org = _parse_term("org_term", node["org_term"], f"{where}.org_term", problems, org=True)
    subs = []
    for name, sub in (node.get("sub_terms") or {}).items():
        term = _parse_term(str(name), sub, f"{where}.sub_terms.{name}", problems, org=False)
        if term is not None:
            subs.append(term)
    if org is None and not subs:
        problems.append(f"{where}: at least one loss term (org_term or sub_terms) is required")
    return CriterionSpec(type=str(node["type"]), org_term=org, sub_terms=tuple(subs))


def _parse_component(node, where: str, problems: list[str]) -> ComponentSpec:
    if not isinstance(node, dict) or "type" not in node:
        problems.append(f"{where}: expected a mapping with 'type' and 'params'")
        return ComponentSpec(type="", params={})
    return ComponentSpec(type=str(node["type"]), params=dict(node.get("params") or {}))


def _parse_model_setup(node, default_requires_grad: bool, where: str,
                       problems: list[str]) -> ModelStageSetup:
    if not isinstance(node, dict):
        problems.append(f"{where}: expected a mapping")
        node = {}
    seq = node.get("sequential", [])
    if seq == "empty":
        sequential: tuple[str, ...] | str = "empty"
    elif isinstance(seq, list):
        sequential = tuple(str(p) for p in seq)
    else:
        problems.append(f"{where}: sequential must be a list of module paths or 'empty'")
        sequential = ()
    hook = node.get("forward_hook") or {}
    if not isinstance(hook, dict) or set(hook) - {"input", "output"}:
        problems.append(f"{where}: forward_hook must map 'input'/'output' to path lists")
        hook = {}
    hook = {k: list(v or []) for k, v in hook.items()}
    auxiliaries = []
    for name, a in (node.get("auxiliaries") or {}).items():
        if not isinstance(a, dict) or "type" not in a or "input" not in a:
            problems.append(f"{where}.auxiliaries.{name}: needs 'type' and an 'input' binding")
            continue
        default_model = "student" if default_requires_grad else "teacher"
        auxiliaries.append(
            AuxiliarySpec(
                name=str(name),
                type=str(a["type"]),
                params=dict(a.get("params") or {}),
                input_binding=_parse_binding(a["input"], default_model,
                                             f"{where}.auxiliaries.{name}.input", problems),
                trainable=bool(a.get("trainable", True)),
            )
        )
    return ModelStageSetup(
        sequential=sequential,
        frozen_modules=tuple(str(p) for p in node.get("frozen_modules") or []),
        requires_grad=bool(node.get("requires_grad", default_requires_grad)),
        wrapper=str(node.get("wrapper") or "none"),
        forward_hook=hook,
        auxiliaries=tuple(auxiliaries),
    )


def _parse_datasets(node, problems: list[str]) -> dict[str, DatasetSpec]:
    out: dict[str, DatasetSpec] = {}
    if not isinstance(node, dict):
        problems.append("datasets: expected a mapping")
        return out
    for ds_name, ds in node.items():
        if not isinstance(ds, dict):
            problems.append(f"datasets.{ds_name}: expected a mapping")
            continue
        ds_type = ds.get("type")
        if not ds_type:
            problems.append(f"datasets.{ds_name}: missing 'type'")
            continue
        splits = ds.get("splits")
        if not isinstance(splits, dict):
            problems.append(f"datasets.{ds_name}: missing 'splits'")
            continue
        for split_name, split in splits.items():
            if not isinstance(split, dict) or "dataset_id" not in split:
                problems.append(f"datasets.{ds_name}.splits.{split_name}: missing dataset_id")
                continue
            dataset_id = str(split["dataset_id"])
            params = dict(split.get("params") or {})
            transform = tuple(
                {"type": s.get("type"), "params": dict(s.get("params") or {})}
                for s in (params.pop("transform_params", None) or [])
                if isinstance(s, dict)
            )
            if dataset_id in out:
                problems.append(f"duplicate dataset_id '{dataset_id}'")
            out[dataset_id] = DatasetSpec(
                dataset_id=dataset_id, type=str(ds_type), params=params, transform=transform
            )
    return out


def _parse_model(node, which: str, problems: list[str]) -> ModelSpec:
    if not isinstance(node, dict) or "name" not in node:
        problems.append(f"models.{which}: expected a mapping with 'name'")
        return ModelSpec(name="", params={})
    return ModelSpec(
        name=str(node["name"]),
        params=dict(node.get("params") or {}),
        ckpt=node.get("ckpt") or None,
    )


def _split_stages(train_node: dict, problems: list[str]) -> list[dict]:
    stage_keys = sorted(
        (k for k in train_node if isinstance(k, str) and k.startswith("stage")
         and k[5:].isdigit()),
        key=lambda k: int(k[5:]),
    )
    if stage_keys:
        expected = [f"stage{i}" for i in range(1, len(stage_keys) + 1)]
        if stage_keys != expected:
            problems.append(f"train: stages must be numbered consecutively from stage1, got {stage_keys}")
        extras = [k for k in train_node if k not in stage_keys]
        if extras:
            warnings.warn(f"train: ignoring non-stage keys {extras} in multi-stage config")
        return [train_node[k] if isinstance(train_node[k], dict) else {} for k in stage_keys]
    return [train_node]


# --- build + validate ---------------------------------------------------------

def build_experiment(tree: dict, registry: Registry | None = None) -> ExperimentConfig:
    """Validate the parsed tree against the registry and resolve all stages.

    All problems are collected into one ValidationError rather than failing
    fast; unknown top-level keys warn and are ignored.
    """
    registry = registry or default_registry
    problems: list[str] = []
    if not isinstance(tree, dict):
        raise ValidationError(["config root must be a mapping"])

    known_top = {"datasets", "models", "train", "test"}
    for extra in set(tree) - known_top:
        warnings.warn(f"ignoring unknown top-level config key '{extra}'")
    for section in ("datasets", "models", "train", "test"):
        if section not in tree:
            problems.append(f"missing required section '{section}'")
    if problems:
        raise ValidationError(problems)

    datasets = _parse_datasets(tree["datasets"], problems)
    models_node = tree["models"] if isinstance(tree["models"], dict) else {}
    teacher = _parse_model(models_node.get("teacher_model"), "teacher_model", problems)
    student = _parse_model(models_node.get("student_model"), "student_model", problems)

    train_node = tree["train"]
    if not isinstance(train_node, dict):
        problems.append("train: expected a mapping")
        raise ValidationError(problems)
    raw_stages = _split_stages(dict(train_node), problems)
    for raw in raw_stages:
        for k in _IGNORED_STAGE_KEYS:
            if k in raw:
                warnings.warn(f"stage key '{k}' accepted but ignored at desk scale")

    stages: list[ResolvedStage] = []
    prev: ResolvedStage | None = None
    try:
        for k in range(1, len(raw_stages) + 1):
            prev = resolve_stage(raw_stages, k, prev, problems)
            stages.append(prev)
    except IncompleteStageError as exc:
        problems.append(str(exc))
        raise ValidationError(problems) from exc

    test_node = tree["test"] if isinstance(tree["test"], dict) else {}
    if "test_data_loader" not in test_node:
        problems.append("test: missing test_data_loader")
        raise ValidationError(problems)
    test = TestSpec(
        loader=_parse_loader(test_node["test_data_loader"], "test_data_loader", problems),
        metrics=tuple(test_node.get("metrics") or ["top1"]),
    )

    config = ExperimentConfig(
        datasets=datasets, teacher=teacher, student=student,
        stages=tuple(stages), test=test,
    )
    _validate_semantics(config, registry, problems)
    if problems:
        raise ValidationError(problems)
    return config


def _check_component(registry: Registry, category: str, name: str, where: str,
                     problems: list[str]) -> bool:
    try:
        registry.resolve(category, name)
        return True
    except UnknownComponentError as exc:
        hint = f" (did you mean: {', '.join(exc.suggestions)}?)" if exc.suggestions else ""
        problems.append(f"{where}: unknown {category} '{name}'{hint}")
        return False


def _validate_semantics(config: ExperimentConfig, registry: Registry,
                        problems: list[str]) -> None:
    # registry names
    for ds in config.datasets.values():
        _check_component(registry, "dataset", ds.type, f"dataset '{ds.dataset_id}'", problems)
        for step in ds.transform:
            if step["type"]:
                _check_component(registry, "transform", step["type"],
                                 f"dataset '{ds.dataset_id}' transform", problems)
    teacher_ok = _check_component(registry, "model", config.teacher.name, "teacher_model", problems)
    student_ok = _check_component(registry, "model", config.student.name, "student_model", problems)

    # construct the models once to validate module paths against them
    from .hooks import list_module_paths
    from .models import redesign

    def model_paths(spec: ModelSpec, setup: ModelStageSetup, where: str) -> set[str] | None:
        try:
            model = registry.instantiate("model", spec.name, spec.params)
        except Exception as exc:
            problems.append(f"{where}: cannot construct '{spec.name}': {exc}")
            return None
        base_paths = set(list_module_paths(model))
        if setup.sequential == "empty":
            return set()
        if setup.sequential:
            missing = [p for p in setup.sequential if p not in base_paths]
            if missing:
                problems.append(f"{where}: sequential names nonexistent module paths {missing}")
                return None
            try:
                pruned = redesign(model, list(setup.sequential))
            except Exception as exc:
                problems.append(f"{where}: invalid sequential spec: {exc}")
                return None
            return set(list_module_paths(pruned))
        return base_paths

    # datasets referenced by loaders, and their sizes
    lengths: dict[str, int | None] = {}
    for ds_id, ds in config.datasets.items():
        try:
            obj = registry.instantiate("dataset", ds.type, ds.params)
            lengths[ds_id] = len(obj)
        except Exception:
            lengths[ds_id] = None

    def check_loader(loader: LoaderSpec, where: str, require_nonempty: bool = False):
        if loader.dataset_id not in config.datasets:
            problems.append(f"{where}: dangling dataset_id '{loader.dataset_id}'")
            return
        n = lengths.get(loader.dataset_id)
        if require_nonempty and n is not None and n // loader.batch_size == 0 and n < loader.batch_size and n == 0:
            problems.append(f"{where}: dataset '{loader.dataset_id}' is empty")
        if require_nonempty and n == 0:
            return

    for i, stage in enumerate(config.stages, 1):
        where = f"stage {i}"
        check_loader(stage.train_loader, f"{where} train_data_loader")
        check_loader(stage.val_loader, f"{where} val_data_loader")
        n_val = lengths.get(stage.val_loader.dataset_id)
        if n_val == 0:
            problems.append(f"{where}: val loader has 0 batches (empty dataset)")

        _check_component(registry, "optimizer", stage.optimizer.type, f"{where} optimizer", problems)
        if stage.scheduler is not None:
            _check_component(registry, "scheduler", stage.scheduler.type, f"{where} scheduler", problems)
        _check_component(registry, "loss", stage.criterion.type, f"{where} criterion", problems)
        for term in ((stage.criterion.org_term,) if stage.criterion.org_term else ()) + stage.criterion.sub_terms:
            if term.criterion_type:
                _check_component(registry, "loss", term.criterion_type,
                                 f"{where} criterion term '{term.name}'", problems)

        for side_name, spec, setup in (("teacher", config.teacher, stage.teacher),
                                       ("student", config.student, stage.student)):
            if not (teacher_ok if side_name == "teacher" else student_ok):
                continue
            paths = model_paths(spec, setup, f"{where} {side_name}")
            if paths is None:
                continue
            for p, _side in setup.hook_paths():
                if p not in paths:
                    problems.append(f"{where} {side_name}: forward_hook path '{p}' does not exist")
            for p in setup.frozen_modules:
                if p not in paths:
                    problems.append(f"{where} {side_name}: frozen module path '{p}' does not exist")
            if setup.wrapper != "none":
                if _check_component(registry, "wrapper", setup.wrapper,
                                    f"{where} {side_name} wrapper", problems):
                    warnings.warn(
                        f"{where} {side_name}: wrapper '{setup.wrapper}' accepted but ignored "
                        "(single-process training)"
                    )
            hooked = {p for p, _ in setup.hook_paths()}
            aux_names: set[str] = set()
            for aux in setup.auxiliaries:
                _check_component(registry, "auxiliary", aux.type,
                                 f"{where} {side_name} auxiliary '{aux.name}'", problems)
                b = aux.input_binding
                if b.model != side_name:
                    problems.append(
                        f"{where} {side_name} auxiliary '{aux.name}': input must bind to "
                        "this model's own captures"
                    )
                if b.path is not None and b.path not in hooked | aux_names:
                    problems.append(
                        f"{where} {side_name} auxiliary '{aux.name}': input path '{b.path}' "
                        "is not hooked on this model"
                    )
                aux_names.add(aux.name)

        # caching requires a deterministic transform pipeline
        if stage.train_loader.cache_output:
            ds = config.datasets.get(stage.train_loader.dataset_id)
            if ds is not None:
                for step in ds.transform:
                    try:
                        meta = registry.metadata("transform", step["type"])
                    except UnknownComponentError:
                        continue
                    if meta.get("stochastic"):
                        problems.append(
                            f"{where}: cache_output is set but transform '{step['type']}' "
                            "is stochastic; teacher-output caching must be off under data "
                            "augmentation"
                        )

    check_loader(config.test.loader, "test_data_loader")
