"""Forward-hook capture of intermediate inputs/outputs into an I/O dictionary.

Captures never alter what the hooked modules compute or return; they clone
tensors out of the forward pass. When a module object fires more than once in
one forward (a shared activation module reused inside a block), the last
firing wins, so hooking the input of a reused in-block ReLU yields the final
pre-activation tensor.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import MissingCaptureError, UnknownModulePathError


def list_module_paths(model: nn.Module) -> list[str]:
    """All dotted submodule paths, excluding the root itself."""
    return [name for name, _ in model.named_modules() if name]


def get_module(model: nn.Module, path: str) -> nn.Module:
    mods = dict(model.named_modules())
    if path not in mods:
        raise UnknownModulePathError(path, sorted(p for p in mods if p))
    return mods[path]


def _clone(value, detach: bool):
    if isinstance(value, torch.Tensor):
        v = value.detach() if detach else value
        return v.clone()
    if isinstance(value, (tuple, list)):
        return tuple(_clone(v, detach) for v in value)
    if isinstance(value, dict):
        return {k: _clone(v, detach) for k, v in value.items()}
    return value


class IODictionary:
    """Per-forward capture store keyed by (module path, 'input'|'output').

    ``generation`` increments at the start of every root forward; all entries
    from the previous forward are dropped at that point. The final model
    output is stored under the reserved path ``'.'``.
    """

    MODEL_OUTPUT = "."

    def __init__(self):
        self.generation = 0
        self._store: dict[tuple[str, str], object] = {}

    def begin_forward(self):
        self.generation += 1
        self._store.clear()

    def put(self, path: str, side: str, value) -> None:
        self._store[(path, side)] = value

    def get(self, path: str, side: str = "output", index: int | None = None):
        key = (path, side)
        if key not in self._store:
            raise MissingCaptureError(path, side, self.generation,
                                      sorted(f"{p}:{s}" for p, s in self._store))
        value = self._store[key]
        if index is not None:
            return value[index]
        return value

    def keys(self):
        return sorted(self._store)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._store

    @property
    def model_output(self):
        return self.get(self.MODEL_OUTPUT, "output")


class HookHandleSet:
    """Owns the registered hook handles; removal is idempotent."""

    def __init__(self, handles):
        self._handles = list(handles)

    def remove(self):
        for h in self._handles:
            h.remove()
        self._handles = []

    def __len__(self):
        return len(self._handles)


def detach(handles: HookHandleSet) -> None:
    """Remove all hooks in the set; safe to call twice."""
    handles.remove()


def get(io: IODictionary, path: str, side: str = "output", index: int | None = None):
    """Fetch a captured value; raises MissingCapture for un-captured entries."""
    return io.get(path, side, index)


def attach(model: nn.Module, specs, detach: bool = False):
    """Register capture hooks on ``model``.

    specs: iterable of (path, side) with side 'input' or 'output'. Multiple
    sides on one path are fine. Returns (HookHandleSet, IODictionary); the
    io dict also receives the root model output each forward.
    """
    io = IODictionary()
    handles = []

    def _root_pre(module, args):
        io.begin_forward()

    def _root_post(module, args, output):
        io.put(IODictionary.MODEL_OUTPUT, "output", _clone(output, detach))

    handles.append(model.register_forward_pre_hook(_root_pre))
    handles.append(model.register_forward_hook(_root_post))

    wanted: dict[str, set[str]] = {}
    for path, side in specs:
        if side not in ("input", "output"):
            raise ValueError(f"hook side must be 'input' or 'output', got {side!r}")
        wanted.setdefault(path, set()).add(side)

    for path, sides in wanted.items():
        module = get_module(model, path)

        def _capture(mod, args, output, _path=path, _sides=tuple(sides)):
            if "input" in _sides:
                # single positional arg is stored bare, multiples as a tuple
                value = args[0] if len(args) == 1 else args
                io.put(_path, "input", _clone(value, detach))
            if "output" in _sides:
                io.put(_path, "output", _clone(output, detach))

        handles.append(module.register_forward_hook(_capture))

    return HookHandleSet(handles), io
