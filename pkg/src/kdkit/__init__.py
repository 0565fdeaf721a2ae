"""Configuration-driven knowledge distillation toolkit.

Importing the package registers the built-in models, datasets, transforms,
losses, optimizers, schedulers, and auxiliary modules; user code extends any
of these through the same registry decorators without touching the framework.
"""

from . import data, engine, losses, models, zoo  # noqa: F401  (registration side effects)
from .config import build_experiment, emit, parse_config
from .engine import evaluate, run_experiment, run_test_only
from .hooks import IODictionary, attach, detach, get, list_module_paths
from .logs import LogWriter, parse_log
from .registry import (
    Registry,
    default_registry,
    register_auxiliary,
    register_dataset,
    register_loss,
    register_model,
    register_optimizer,
    register_scheduler,
    register_special,
    register_transform,
    register_wrapper,
)
from .utils import derive_seed, seed_everything

# everything registered during package import is a built-in: shipped configs
# depend on these names, so unregister() refuses to remove them
for _cat in default_registry._entries:
    for _entry in default_registry._entries[_cat].values():
        _entry["builtin"] = True
del _cat, _entry

__version__ = "0.1.0"

__all__ = [
    "Registry",
    "default_registry",
    "register_model",
    "register_dataset",
    "register_transform",
    "register_loss",
    "register_optimizer",
    "register_scheduler",
    "register_auxiliary",
    "register_wrapper",
    "register_special",
    "parse_config",
    "build_experiment",
    "emit",
    "attach",
    "detach",
    "get",
    "list_module_paths",
    "IODictionary",
    "run_experiment",
    "run_test_only",
    "evaluate",
    "LogWriter",
    "parse_log",
    "derive_seed",
    "seed_everything",
    "__version__",
]
