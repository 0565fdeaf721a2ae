"""Model lifecycle: checkpoints, freezing, pruning to retained modules, and
special modules that run auxiliary branches after the base forward."""

from __future__ import annotations

import os
import warnings

import torch
from torch import nn

from .errors import CheckpointMismatchError, ShapeMismatchError
from .hooks import IODictionary, get_module
from .registry import Registry, default_registry, register_auxiliary, register_special
from .serialization import load_tensor_file, save_tensor_file


# --- freezing -------------------------------------------------------------------

def freeze(model: nn.Module, frozen_modules=(), requires_grad: bool = True) -> None:
    """Exclude parameters from optimization.

    requires_grad=False freezes the whole model; otherwise only the listed
    module paths are frozen.
    """
    for p in model.parameters():
        p.requires_grad_(requires_grad)
    if requires_grad:
        for path in frozen_modules:
            for p in get_module(model, path).parameters():
                p.requires_grad_(False)


def parameter_snapshot(model: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def max_param_diff(a: dict, b: dict) -> float:
    diffs = [0.0]
    for k in a:
        diffs.append((a[k].to(torch.float64) - b[k].to(torch.float64)).abs().max().item())
    return max(diffs)


# --- redesign -------------------------------------------------------------------

class EmptyModel(nn.Module):
    """Accepts anything, computes nothing, returns None."""

    def forward(self, *args, **kwargs):
        return None


class RedesignedModel(nn.Module):
    """Executes retained module paths of an existing model in the given order.

    Retained modules are the original objects (shared parameter storage), and
    they keep their original dotted paths here, so hook configs written for
    the full model stay valid on the pruned one.
    """

    def __init__(self, paths, modules):
        super().__init__()
        self.paths = list(paths)
        for path, mod in zip(paths, modules):
            parent: nn.Module = self
            parts = path.split(".")
            for part in parts[:-1]:
                child = parent._modules.get(part)
                if child is None:
                    child = nn.Module()
                    parent.add_module(part, child)
                parent = child
            parent.add_module(parts[-1], mod)
        self._chain = list(modules)

    def forward(self, x):
        for m in self._chain:
            x = m(x)
        return x

    def dry_run(self, example_input: torch.Tensor) -> None:
        """Zero-batch forward that names the first shape-incompatible link."""
        modes = [(m, m.training) for m in self.modules()]
        self.eval()
        try:
            with torch.no_grad():
                x = torch.zeros_like(example_input)
                for path, m in zip(self.paths, self._chain):
                    try:
                        x = m(x)
                    except Exception as exc:
                        shape = tuple(x.shape) if isinstance(x, torch.Tensor) else type(x).__name__
                        raise ShapeMismatchError(
                            f"redesigned chain breaks at '{path}' on input shape {shape}: {exc}"
                        ) from exc
        finally:
            for m, training in modes:
                m.training = training


def redesign(model: nn.Module, sequential, example_input: torch.Tensor | None = None):
    """Prune a model to the listed module paths, executed in order.

    sequential 'empty' -> EmptyModel; empty list -> the model itself,
    unaltered. Listed modules share storage with the original, so training
    the pruned model trains the original.
    """
    if sequential == "empty":
        return EmptyModel()
    seq = [str(p) for p in sequential]
    if not seq:
        return model
    for a in seq:
        for b in seq:
            if a != b and b.startswith(a + "."):
                raise ValueError(f"redesign paths overlap: '{a}' is an ancestor of '{b}'")
    if len(set(seq)) != len(seq):
        raise ValueError(f"redesign paths repeat: {seq}")
    modules = [get_module(model, p) for p in seq]
    pruned = RedesignedModel(seq, modules)
    if example_input is not None:
        pruned.dry_run(example_input)
    return pruned


def count_module_calls(model: nn.Module, x) -> int:
    """Number of submodule forward invocations during one forward pass."""
    counter = {"n": 0}

    def bump(module, args, output):
        counter["n"] += 1

    handles = [m.register_forward_hook(bump) for _, m in model.named_modules()]
    try:
        with torch.no_grad():
            model(x)
    finally:
        for h in handles:
            h.remove()
    return counter["n"]


# --- special module -------------------------------------------------------------

@register_special("AuxSpecialModule")
class SpecialModule(nn.Module):
    """Base model plus auxiliary branches fed from its I/O dictionary.

    forward(x) runs the base (under no_grad when inference_only_base, the
    frozen-teacher case), then post_forward computes each auxiliary on its
    bound capture and records the result in the I/O dictionary under the
    auxiliary's name. Returns the base output unchanged.
    """

    def __init__(self, base: nn.Module, io: IODictionary, auxiliaries=(),
                 inference_only_base: bool = False):
        super().__init__()
        self.base = base
        self.auxiliaries = nn.ModuleDict({spec.name: mod for spec, mod in auxiliaries})
        self._aux_specs = [spec for spec, _ in auxiliaries]
        self.inference_only_base = inference_only_base
        self._io = io

    @property
    def io(self) -> IODictionary:
        return self._io

    def forward(self, x):
        if self.inference_only_base:
            with torch.no_grad():
                out = self.base(x)
        else:
            out = self.base(x)
        self.post_forward(self._io)
        return out

    def post_forward(self, io: IODictionary) -> None:
        for spec in self._aux_specs:
            mod = self.auxiliaries[spec.name]
            b = spec.input_binding
            value = io.get(b.path, b.io, b.index)
            if spec.trainable:
                result = mod(value)
            else:
                with torch.no_grad():
                    result = mod(value)
            io.put(spec.name, "output", result)


def build_special(base: nn.Module, io: IODictionary, aux_specs=(),
                  registry: Registry | None = None, aux_pool: dict | None = None,
                  inference_only_base: bool = False) -> SpecialModule:
    """Instantiate (or reuse from aux_pool, keyed by name) each auxiliary and
    wrap the base model. Reuse keeps parameters trained in earlier stages."""
    registry = registry or default_registry
    pairs = []
    for spec in aux_specs:
        if aux_pool is not None and spec.name in aux_pool:
            mod = aux_pool[spec.name]
        else:
            mod = registry.instantiate("auxiliary", spec.type, dict(spec.params))
            if aux_pool is not None:
                aux_pool[spec.name] = mod
        pairs.append((spec, mod))
    return SpecialModule(base, io, pairs, inference_only_base)


# --- auxiliaries ------------------------------------------------------------------

@register_auxiliary("Regressor")
class Regressor(nn.Module):
    """Channel-mapping convolution that regresses a guided feature map onto a
    hint's shape. Default is a bare 1x1 convolution."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1,
                 stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride,
                              padding=kernel_size // 2)

    def forward(self, x):
        return self.conv(x)


def _conv_bn_act(conv: nn.Module, channels: int, negative_slope: float) -> nn.Sequential:
    return nn.Sequential(conv, nn.BatchNorm2d(channels), nn.LeakyReLU(negative_slope))


@register_auxiliary("Paraphraser")
class Paraphraser(nn.Module):
    """Feature autoencoder: encoder compresses channels by ``rate`` into the
    factor, decoder reconstructs the input map. forward -> (reconstruction,
    factor); bind index 0 to train it, index 1 to read the factor."""

    def __init__(self, in_channels: int, rate: float = 0.5, negative_slope: float = 0.1):
        super().__init__()
        mid = max(1, int(round(in_channels * rate)))
        self.factor_channels = mid
        self.encoder = nn.Sequential(
            _conv_bn_act(nn.Conv2d(in_channels, in_channels, 3, padding=1), in_channels, negative_slope),
            _conv_bn_act(nn.Conv2d(in_channels, mid, 3, padding=1), mid, negative_slope),
            _conv_bn_act(nn.Conv2d(mid, mid, 3, padding=1), mid, negative_slope),
        )
        self.decoder = nn.Sequential(
            _conv_bn_act(nn.ConvTranspose2d(mid, mid, 3, padding=1), mid, negative_slope),
            _conv_bn_act(nn.ConvTranspose2d(mid, in_channels, 3, padding=1), in_channels, negative_slope),
            _conv_bn_act(nn.ConvTranspose2d(in_channels, in_channels, 3, padding=1), in_channels, negative_slope),
        )

    def forward(self, x):
        factor = self.encoder(x)
        reconstruction = self.decoder(factor)
        return reconstruction, factor


@register_auxiliary("Translator")
class Translator(nn.Module):
    """Maps student features into the paraphraser's factor space; mirrors the
    paraphraser encoder, with an optional stride to match spatial size."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 negative_slope: float = 0.1):
        super().__init__()
        self.net = nn.Sequential(
            _conv_bn_act(nn.Conv2d(in_channels, in_channels, 3, stride=stride, padding=1),
                         in_channels, negative_slope),
            _conv_bn_act(nn.Conv2d(in_channels, out_channels, 3, padding=1), out_channels, negative_slope),
            _conv_bn_act(nn.Conv2d(out_channels, out_channels, 3, padding=1), out_channels, negative_slope),
        )

    def forward(self, x):
        return self.net(x)


# --- checkpoints ------------------------------------------------------------------

def load_state(model: nn.Module, tensors: dict) -> None:
    """Strict state load; mismatched names or shapes raise with the offenders."""
    current = model.state_dict()
    missing = sorted(k for k in current if k not in tensors)
    unexpected = sorted(k for k in tensors if k not in current)
    mismatched = sorted(
        k for k in current
        if k in tensors and tuple(current[k].shape) != tuple(tensors[k].shape)
    )
    if missing or unexpected or mismatched:
        parts = []
        if missing:
            parts.append(f"missing: {missing}")
        if unexpected:
            parts.append(f"unexpected: {unexpected}")
        if mismatched:
            parts.append(f"shape mismatch: {mismatched}")
        raise CheckpointMismatchError("; ".join(parts), missing + unexpected + mismatched)
    model.load_state_dict(tensors, strict=True)


def save_ckpt(model: nn.Module, path: str) -> None:
    save_tensor_file(path, {k: v for k, v in model.state_dict().items()})


def load_ckpt(model: nn.Module, path: str, pretrained_fallback: bool = False) -> None:
    """Initialize from a checkpoint file.

    Missing file: with pretrained_fallback the model keeps its (pretrained)
    factory initialization and a warning records that; otherwise it's an error.
    """
    if not os.path.exists(path):
        if pretrained_fallback:
            warnings.warn(f"checkpoint '{path}' not found; keeping pretrained "
                          "registry initialization")
            return
        raise FileNotFoundError(f"checkpoint '{path}' not found")
    load_state(model, load_tensor_file(path))
