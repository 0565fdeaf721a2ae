"""Exception types raised across the framework.

Every failure mode a configuration author can hit maps to a distinct type so
callers (and the CLI) can tell a config typo from an I/O failure from a
numerical blow-up.
"""

from __future__ import annotations


class KDKitError(Exception):
    """Base class for all framework errors."""


# --- registry ---------------------------------------------------------------

class InvalidNameError(KDKitError):
    """A component was registered under an empty or malformed name."""


class DuplicateRegistrationError(KDKitError):
    """(category, name) already registered and override was not requested."""


class UnknownComponentError(KDKitError):
    """A config string did not resolve to any registered component."""

    def __init__(self, category: str, name: str, suggestions: list[str]):
        self.category = category
        self.name = name
        self.suggestions = list(suggestions)
        hint = f" (did you mean: {', '.join(suggestions)}?)" if suggestions else ""
        super().__init__(f"unknown {category} component '{name}'{hint}")


class ConstructionError(KDKitError):
    """A factory raised while constructing a component."""

    def __init__(self, category: str, name: str, params: dict, cause: BaseException):
        self.category = category
        self.name = name
        self.param_names = sorted(params)
        self.cause = cause
        super().__init__(
            f"failed to construct {category} '{name}' with params "
            f"{self.param_names}: {cause}"
        )


# --- configuration ----------------------------------------------------------

class ConfigSyntaxError(KDKitError):
    """Config text is not syntactically valid; carries line/column."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" at line {line}, column {column}" if line is not None else ""
        super().__init__(f"{message}{where}")


class UnresolvedAliasError(ConfigSyntaxError):
    """An alias (*name) referenced an anchor that was never defined."""

    def __init__(self, anchor: str, line: int | None = None, column: int | None = None):
        self.anchor = anchor
        super().__init__(f"undefined alias '*{anchor}'", line, column)


class JoinTypeError(KDKitError):
    """A !join element was a mapping or list (only scalars join)."""


class ValidationError(KDKitError):
    """One or more semantic problems in an experiment config.

    All problems found in a validation pass are collected here rather than
    failing on the first one.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__(
            "invalid experiment config:\n" + "\n".join(f"  - {p}" for p in self.problems)
        )


class IncompleteStageError(KDKitError):
    """Stage 1 lacks a required field after defaults."""


# --- hooks ------------------------------------------------------------------

class UnknownModulePathError(KDKitError):
    """A dotted module path does not exist in the target model."""

    def __init__(self, path: str, available: list[str]):
        self.path = path
        self.available = list(available)
        preview = ", ".join(available[:12]) + (", ..." if len(available) > 12 else "")
        super().__init__(f"no submodule at path '{path}'; available paths: [{preview}]")


class MissingCaptureError(KDKitError):
    """A requested (path, side) was not captured in the current generation."""

    def __init__(self, path: str, side: str, generation: int, available=()):
        self.path = path
        self.side = side
        self.generation = generation
        self.available = list(available)
        hint = f"; captured this forward: {self.available}" if self.available else ""
        super().__init__(
            f"no '{side}' capture for '{path}' in generation {generation}; "
            f"is the module hooked and has a forward pass run?{hint}"
        )


# --- data / cache -----------------------------------------------------------

class StorageError(KDKitError):
    """Cache or checkpoint I/O failed."""


class CacheMissError(KDKitError):
    """One or more sample indices are absent from the cache store."""

    def __init__(self, missing: list[int]):
        self.missing = list(missing)
        super().__init__(f"cache miss for {len(self.missing)} indices: {self.missing[:10]}")


# --- models -----------------------------------------------------------------

class ShapeMismatchError(KDKitError):
    """Two tensors that must agree in shape do not."""


class CheckpointMismatchError(KDKitError):
    """Checkpoint keys/shapes do not match the target model."""

    def __init__(self, message: str, unmatched: list[str]):
        self.unmatched = list(unmatched)
        super().__init__(f"{message}: {self.unmatched[:10]}")


# --- losses -----------------------------------------------------------------

class InvalidTemperatureError(KDKitError):
    """Softmax temperature must be > 0."""


class ZeroNormError(KDKitError):
    """A vector with zero L2 norm was normalized in strict mode."""


class NonFiniteLossError(KDKitError):
    """A loss term evaluated to NaN or Inf."""

    def __init__(self, term: str, value: float, other_terms: dict | None = None):
        self.term = term
        self.value = value
        self.other_terms = dict(other_terms or {})
        detail = f"; other terms this batch: {self.other_terms}" if self.other_terms else ""
        super().__init__(f"loss term '{term}' is non-finite ({value}){detail}")
