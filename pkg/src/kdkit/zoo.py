"""Reference models and datasets sized for laptop-scale experiments.

The TinyResNet family keeps torchvision-style submodule names (conv1, bn1,
relu, layer1..layerN with indexed blocks, avgpool, fc) so dotted hook paths
like "layer1.1.relu" resolve. Each residual block routes both of its
activations through one shared ReLU module; capturing that module's input
therefore yields the block's final pre-activation tensor.

SyntheticImages is a pure function of (seed, split, index): prototype images
per class plus per-sample Gaussian noise, optionally with deterministic label
corruption for robustness experiments. No files, no downloads.
"""

from __future__ import annotations

import importlib.resources

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .registry import default_registry, register_dataset, register_model
from .utils import derive_seed


class BasicBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        # one ReLU instance fires twice per forward; hooking its input gives
        # the pre-activation of the block output (last firing wins)
        self.relu = nn.ReLU()
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = None
        if stride != 1 or in_planes != planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = self.conv1(x)
        out = self.bn1(out)
        out = self.relu(out)
        out = self.conv2(out)
        out = self.bn2(out)
        identity = x if self.downsample is None else self.downsample(x)
        out = out + identity
        out = self.relu(out)
        return out


class TinyResNet(nn.Module):
    """Residual classifier with ``depth`` groups of two blocks each.

    The forward pass is a plain chain over the registered children, so any
    prefix of the child sequence is a valid standalone computation.
    """

    def __init__(self, depth: int = 2, num_classes: int = 10, width: int = 8,
                 in_channels: int = 3):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.conv1 = nn.Conv2d(in_channels, width, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu = nn.ReLU()
        in_planes = width
        for g in range(1, depth + 1):
            planes = width * (2 ** (g - 1))
            stride = 1 if g == 1 else 2
            self.add_module(
                f"layer{g}",
                nn.Sequential(BasicBlock(in_planes, planes, stride),
                              BasicBlock(planes, planes, 1)),
            )
            in_planes = planes
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten(1)
        self.fc = nn.Linear(in_planes, num_classes)

    def forward(self, x):
        for _, child in self.named_children():
            x = child(x)
        return x


class TinyMLP(nn.Module):
    """Two-layer perceptron; the cheap student for cache benchmarks."""

    def __init__(self, num_classes: int = 10, width: int = 64, in_features: int = 3 * 16 * 16):
        super().__init__()
        self.flatten = nn.Flatten(1)
        self.fc1 = nn.Linear(in_features, width)
        self.relu = nn.ReLU()
        self.fc2 = nn.Linear(width, num_classes)

    def forward(self, x):
        for _, child in self.named_children():
            x = child(x)
        return x


def _packaged_weights(name: str) -> dict:
    from .serialization import load_tensors

    res = importlib.resources.files("kdkit").joinpath(f"zoo_weights/{name}.bin")
    if not res.is_file():
        raise FileNotFoundError(
            f"no packaged weights for '{name}'; train your own checkpoint or use a model "
            "that ships weights"
        )
    return load_tensors(res.read_bytes())


def _make_tinyresnet(name: str, depth: int, num_classes=10, width=8, in_channels=3,
                     seed: int | None = None, pretrained: bool = False) -> TinyResNet:
    # explicit seed -> init independent of ambient RNG state; None -> the
    # caller's seeding (the run seed) governs init
    if seed is None:
        model = TinyResNet(depth=depth, num_classes=num_classes, width=width,
                           in_channels=in_channels)
    else:
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(seed, "model-init", name))
            model = TinyResNet(depth=depth, num_classes=num_classes, width=width,
                               in_channels=in_channels)
    if pretrained:
        from .models import load_state

        load_state(model, _packaged_weights(name))
    return model


@register_model("tinyresnet_d2")
def tinyresnet_d2(**kwargs):
    return _make_tinyresnet("tinyresnet_d2", 2, **kwargs)


@register_model("tinyresnet_d3")
def tinyresnet_d3(**kwargs):
    return _make_tinyresnet("tinyresnet_d3", 3, **kwargs)


@register_model("tinyresnet_d4")
def tinyresnet_d4(**kwargs):
    return _make_tinyresnet("tinyresnet_d4", 4, **kwargs)


@register_model("tinymlp")
def tinymlp(num_classes=10, width=64, in_features=3 * 16 * 16, seed: int | None = None,
            pretrained: bool = False):
    if pretrained:
        raise FileNotFoundError("no packaged weights for 'tinymlp'")
    if seed is None:
        return TinyMLP(num_classes=num_classes, width=width, in_features=in_features)
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "model-init", "tinymlp"))
        return TinyMLP(num_classes=num_classes, width=width, in_features=in_features)


def make_model(name: str, params: dict | None = None) -> nn.Module:
    return default_registry.instantiate("model", name, dict(params or {}))


# --- synthetic data -----------------------------------------------------------

def _prototypes(seed: int, num_classes: int, image_size: int) -> torch.Tensor:
    gen = np.random.Generator(np.random.Philox(key=derive_seed(seed, "prototypes")))
    coarse = gen.standard_normal((num_classes, 3, 4, 4))
    smooth = F.interpolate(torch.from_numpy(coarse), size=(image_size, image_size),
                           mode="bilinear", align_corners=False)
    # unit-variance prototypes so noise_scale is a direct SNR knob
    flat = smooth.reshape(num_classes, -1)
    flat = (flat - flat.mean(dim=1, keepdim=True)) / (flat.std(dim=1, keepdim=True) + 1e-8)
    return flat.reshape(num_classes, 3, image_size, image_size).to(torch.float32)


@register_dataset("SyntheticImages")
class SyntheticImages:
    """Deterministic class-prototype images; sample i depends only on (seed, split, i).

    Labels cycle through the classes, so clean splits are balanced to within
    one sample. label_noise > 0 relabels that fraction of samples to a
    deterministic wrong class; intended for train splits only.
    """

    def __init__(self, split: str = "train", n: int = 1024, num_classes: int = 10,
                 image_size: int = 16, seed: int = 7, noise_scale: float = 2.0,
                 label_noise: float = 0.0, transform=None):
        if n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= label_noise <= 1.0:
            raise ValueError("label_noise must be in [0, 1]")
        self.split = str(split)
        self.n = int(n)
        self.num_classes = int(num_classes)
        self.image_size = int(image_size)
        self.seed = int(seed)
        self.noise_scale = float(noise_scale)
        self.label_noise = float(label_noise)
        self.transform = transform
        self.prototypes = _prototypes(self.seed, self.num_classes, self.image_size)

    def __len__(self):
        return self.n

    def __getitem__(self, i: int):
        if not 0 <= i < self.n:
            raise IndexError(f"index {i} out of range for dataset of length {self.n}")
        gen = np.random.Generator(
            np.random.Philox(key=derive_seed(self.seed, "sample", self.split, i))
        )
        y = i % self.num_classes
        noise = gen.standard_normal((3, self.image_size, self.image_size))
        x = self.prototypes[y] + self.noise_scale * torch.from_numpy(noise).to(torch.float32)
        if self.label_noise > 0.0 and gen.random() < self.label_noise:
            # deterministic wrong class, never the true one
            y = (y + 1 + int(gen.integers(self.num_classes - 1))) % self.num_classes
        if self.transform is not None:
            x = self.transform(x)
        return x, y


@register_dataset("NpzDataset")
class NpzDataset:
    """Adapter for real data shipped as an .npz archive of images and labels.

    images: float array (N, C, H, W) or uint8 (N, H, W, C); labels: int array (N,).
    """

    def __init__(self, path: str, images_key: str = "images", labels_key: str = "labels",
                 transform=None):
        archive = np.load(path)
        images = archive[images_key]
        self.labels = archive[labels_key].astype(np.int64)
        if images.ndim != 4:
            raise ValueError(f"expected 4-d image array, got shape {images.shape}")
        if images.dtype == np.uint8:
            images = images.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
        self.images = torch.from_numpy(np.ascontiguousarray(images)).to(torch.float32)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree on sample count")
        self.transform = transform

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i: int):
        x = self.images[i]
        if self.transform is not None:
            x = self.transform(x)
        return x, int(self.labels[i])


def make_dataset(split: str, spec: dict):
    params = dict(spec.get("params") or {})
    params.setdefault("split", split)
    return default_registry.instantiate("dataset", spec.get("type", "SyntheticImages"), params)
