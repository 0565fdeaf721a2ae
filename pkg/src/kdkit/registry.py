"""Registry mapping (category, name) strings from config files to factories.

Every abstracted component (models, datasets, transforms, losses, optimizers,
schedulers, auxiliary modules, wrappers, special modules) is instantiable by
the string the config uses. New components are added from user code with the
``@register_model`` style decorators, no framework changes needed.
"""

from __future__ import annotations

import inspect
from typing import Any, Callable

from .errors import (
    ConstructionError,
    DuplicateRegistrationError,
    InvalidNameError,
    UnknownComponentError,
)
from .utils import edit_distance

CATEGORIES = (
    "model",
    "dataset",
    "transform",
    "loss",
    "optimizer",
    "scheduler",
    "auxiliary",
    "wrapper",
    "special",
)


class Registry:
    """One flat namespace per category; names are case-sensitive and unique."""

    def __init__(self):
        self._entries: dict[str, dict[str, dict[str, Any]]] = {c: {} for c in CATEGORIES}

    def register(
        self,
        category: str,
        name: str,
        factory: Callable[..., Any],
        *,
        override: bool = False,
        builtin: bool = False,
        **metadata,
    ) -> None:
        """Register ``factory`` under (category, name).

        Built-in components may only be shadowed with ``override=True``; this
        protects shipped configs from accidental redefinition.
        """
        if category not in self._entries:
            raise InvalidNameError(f"unknown category '{category}' (one of {CATEGORIES})")
        if not isinstance(name, str) or not name:
            raise InvalidNameError(f"component name must be a non-empty string, got {name!r}")
        if name in self._entries[category] and not override:
            raise DuplicateRegistrationError(
                f"{category} '{name}' is already registered; pass override=True to replace it"
            )
        self._entries[category][name] = {
            "factory": factory,
            "builtin": builtin,
            "metadata": dict(metadata),
        }

    def resolve(self, category: str, name: str) -> Callable[..., Any]:
        """Return the factory for (category, name).

        Raises UnknownComponentError carrying near-miss registered names
        (edit distance <= 2) so config typos are self-diagnosing.
        """
        entry = self._entries.get(category, {}).get(name)
        if entry is None:
            known = self.names(category)
            near = [k for k in known if edit_distance(k, str(name)) <= 2]
            raise UnknownComponentError(category, str(name), sorted(near))
        return entry["factory"]

    def instantiate(self, category: str, name: str, params: dict | None = None) -> Any:
        """Construct the component, passing ``params`` through unmodified."""
        factory = self.resolve(category, name)
        params = dict(params or {})
        try:
            return factory(**params)
        except Exception as exc:
            err = ConstructionError(category, name, params, exc)
            unexpected = describe_construction_failure(factory, params)
            if unexpected:
                err.param_names = unexpected
                err.args = (f"{err.args[0]} (unexpected params: {unexpected})",)
            raise err from exc

    def unregister(self, category: str, name: str) -> None:
        """Remove a user registration; built-ins stay."""
        entry = self._entries.get(category, {}).get(name)
        if entry is None:
            raise UnknownComponentError(category, str(name), [])
        if entry["builtin"]:
            raise InvalidNameError(f"refusing to unregister built-in {category} '{name}'")
        del self._entries[category][name]

    def metadata(self, category: str, name: str) -> dict:
        self.resolve(category, name)
        return dict(self._entries[category][name]["metadata"])

    def names(self, category: str) -> list[str]:
        return sorted(self._entries.get(category, {}))

    def __contains__(self, key: tuple[str, str]) -> bool:
        category, name = key
        return name in self._entries.get(category, {})


#: The registry shipped configs resolve against. Built-ins are registered
#: here at package import; user code adds to it via the decorators below.
default_registry = Registry()


def _make_decorator(category: str):
    def decorator(arg=None, *, name: str | None = None, override: bool = False, **metadata):
        def apply(obj, reg_name=None):
            key = reg_name or name or getattr(obj, "__name__", None)
            if not key:
                raise InvalidNameError(f"cannot infer a name for {obj!r}")
            default_registry.register(category, key, obj, override=override, **metadata)
            return obj

        if callable(arg) and name is None and not metadata:
            # bare use: @register_model
            return apply(arg)
        if isinstance(arg, str):
            # @register_model("MyModel")
            return lambda obj: apply(obj, arg)
        # @register_model(name=..., override=..., stochastic=...)
        return apply

    decorator.__name__ = f"register_{category}"
    decorator.__doc__ = f"Register a {category} component in the default registry."
    return decorator


register_model = _make_decorator("model")
register_dataset = _make_decorator("dataset")
register_transform = _make_decorator("transform")
register_loss = _make_decorator("loss")
register_optimizer = _make_decorator("optimizer")
register_scheduler = _make_decorator("scheduler")
register_auxiliary = _make_decorator("auxiliary")
register_wrapper = _make_decorator("wrapper")
register_special = _make_decorator("special")


def describe_construction_failure(factory: Callable, params: dict) -> list[str]:
    """Names of params the factory signature does not accept (best effort)."""
    try:
        sig = inspect.signature(factory)
    except (TypeError, ValueError):
        return []
    if any(p.kind is inspect.Parameter.VAR_KEYWORD for p in sig.parameters.values()):
        return []
    return sorted(set(params) - set(sig.parameters))
