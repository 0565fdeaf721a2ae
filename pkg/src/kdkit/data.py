"""Transform pipelines, dataset wrapping, batching, and the teacher-output cache."""

from __future__ import annotations

import hashlib
import json
import os
import warnings

import torch
import torch.nn.functional as F

from .errors import CacheMissError, StorageError
from .registry import Registry, default_registry, register_transform
from .serialization import dump_tensors, load_tensors
from .utils import derive_seed


# --- transforms ----------------------------------------------------------------
# Tensor-in/tensor-out steps. Stochastic steps draw from an own torch.Generator
# that reseed() controls, so a pipeline's randomness is reproducible without
# touching global RNG state.

@register_transform("ToTensor")
class ToTensor:
    """numpy HWC uint8/float -> float32 CHW in [0, 1]; tensors pass through."""

    def __call__(self, x):
        if isinstance(x, torch.Tensor):
            return x.to(torch.float32)
        import numpy as np

        arr = np.asarray(x)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
        if t.dtype == torch.uint8:
            return t.to(torch.float32) / 255.0
        return t.to(torch.float32)


@register_transform("Normalize")
class Normalize:
    def __init__(self, mean, std):
        self.mean = torch.tensor(mean, dtype=torch.float32).reshape(-1, 1, 1)
        self.std = torch.tensor(std, dtype=torch.float32).reshape(-1, 1, 1)

    def __call__(self, x):
        return (x - self.mean) / self.std


@register_transform("Resize")
class Resize:
    def __init__(self, size):
        self.size = (size, size) if isinstance(size, int) else tuple(size)

    def __call__(self, x):
        return F.interpolate(x.unsqueeze(0), size=self.size, mode="bilinear",
                             align_corners=False).squeeze(0)


@register_transform("CenterCrop")
class CenterCrop:
    def __init__(self, size):
        self.size = (size, size) if isinstance(size, int) else tuple(size)

    def __call__(self, x):
        th, tw = self.size
        h, w = x.shape[-2:]
        top = max((h - th) // 2, 0)
        left = max((w - tw) // 2, 0)
        return x[..., top:top + th, left:left + tw]


class _StochasticStep:
    def __init__(self):
        self.generator = torch.Generator()
        self.generator.manual_seed(0)

    def reseed(self, seed: int):
        self.generator.manual_seed(seed)


@register_transform("RandomHorizontalFlip", stochastic=True)
class RandomHorizontalFlip(_StochasticStep):
    def __init__(self, p: float = 0.5):
        super().__init__()
        self.p = float(p)

    def __call__(self, x):
        if torch.rand((), generator=self.generator).item() < self.p:
            return torch.flip(x, dims=[-1])
        return x


@register_transform("RandomResizedCrop", stochastic=True)
class RandomResizedCrop(_StochasticStep):
    def __init__(self, size, scale=(0.5, 1.0)):
        super().__init__()
        self.size = (size, size) if isinstance(size, int) else tuple(size)
        self.scale = tuple(scale)

    def __call__(self, x):
        h, w = x.shape[-2:]
        lo, hi = self.scale
        frac = (lo + (hi - lo) * torch.rand((), generator=self.generator).item()) ** 0.5
        ch, cw = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
        top = int(torch.randint(0, h - ch + 1, (), generator=self.generator))
        left = int(torch.randint(0, w - cw + 1, (), generator=self.generator))
        crop = x[..., top:top + ch, left:left + cw]
        return F.interpolate(crop.unsqueeze(0), size=self.size, mode="bilinear",
                             align_corners=False).squeeze(0)


class TransformPipeline:
    """Ordered composition of transform steps built from config dicts."""

    def __init__(self, steps, step_specs):
        self.steps = list(steps)
        self.step_specs = list(step_specs)

    def __call__(self, x):
        for step in self.steps:
            x = step(x)
        return x

    @property
    def stochastic(self) -> bool:
        return any(hasattr(s, "reseed") for s in self.steps)

    def reseed(self, seed: int):
        for i, step in enumerate(self.steps):
            if hasattr(step, "reseed"):
                step.reseed(derive_seed(seed, "transform-step", i))


def build_transform(spec, registry: Registry | None = None) -> TransformPipeline:
    """spec: list of {'type': registry name, 'params': {...}}; empty -> identity."""
    registry = registry or default_registry
    steps = []
    for s in spec or []:
        steps.append(registry.instantiate("transform", s["type"], dict(s.get("params") or {})))
    return TransformPipeline(steps, spec or [])


# --- dataset wrapping -----------------------------------------------------------

class WrappedDataset:
    """Yields (input, target, supplementary dict) triples.

    supplementary holds sample_index when attach_index is set, plus whatever
    each provider(dataset, i) returns; stable across epochs for fixed i.
    """

    def __init__(self, dataset, attach_index: bool = False, supplementary_providers=None):
        self.dataset = dataset
        self.attach_index = attach_index
        self.providers = list(supplementary_providers or [])

    def __len__(self):
        return len(self.dataset)

    def __getitem__(self, i: int):
        x, y = self.dataset[i]
        supp: dict = {}
        if self.attach_index:
            supp["sample_index"] = i
        for provider in self.providers:
            supp.update(provider(self.dataset, i))
        return x, y, supp


def wrap_dataset(dataset, attach_index: bool = False,
                 supplementary_providers=None) -> WrappedDataset:
    return WrappedDataset(dataset, attach_index, supplementary_providers)


class BatchLoader:
    """Single-threaded deterministic batch iterator over a wrapped dataset.

    Shuffle order comes from an explicit epoch seed, so two runs with the same
    seeds see the same batches. Parallel workers are out of scope; a requested
    num_workers > 0 warns and is ignored.
    """

    def __init__(self, dataset: WrappedDataset, batch_size: int, shuffle: bool = False,
                 num_workers: int = 0, drop_last: bool = False):
        if num_workers:
            warnings.warn("num_workers > 0 requested; loading stays single-threaded")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.shuffle = bool(shuffle)
        self.drop_last = bool(drop_last)
        self._epoch_seed = 0

    def set_epoch_seed(self, seed: int):
        self._epoch_seed = int(seed)

    def __len__(self):
        n = len(self.dataset)
        return n // self.batch_size if self.drop_last else (n + self.batch_size - 1) // self.batch_size

    def __iter__(self):
        n = len(self.dataset)
        if self.shuffle:
            g = torch.Generator()
            g.manual_seed(self._epoch_seed)
            order = torch.randperm(n, generator=g).tolist()
        else:
            order = list(range(n))
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            if self.drop_last and len(idx) < self.batch_size:
                break
            yield self._collate([self.dataset[i] for i in idx])

    @staticmethod
    def _collate(samples):
        xs, ys, supps = zip(*samples)
        inputs = torch.stack(list(xs), dim=0)
        targets = torch.tensor(list(ys), dtype=torch.long)
        supp: dict = {}
        for key in supps[0]:
            vals = [s[key] for s in supps]
            if all(isinstance(v, int) for v in vals):
                supp[key] = torch.tensor(vals, dtype=torch.long)
            elif all(isinstance(v, torch.Tensor) for v in vals):
                supp[key] = torch.stack(vals, dim=0)
            else:
                supp[key] = list(vals)
        return inputs, targets, supp


# --- teacher-output cache ---------------------------------------------------------

_MANIFEST = "manifest"


def teacher_fingerprint(teacher_name: str, ckpt_path: str | None, capture_keys) -> dict:
    """Identity of the teacher configuration a cache was written under."""
    ckpt_hash = None
    if ckpt_path and os.path.exists(ckpt_path):
        h = hashlib.sha256()
        with open(ckpt_path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
        ckpt_hash = h.hexdigest()
    return {
        "teacher": teacher_name,
        "ckpt_sha256": ckpt_hash,
        "captures": sorted(capture_keys),
    }


class CacheStore:
    """Per-sample-index store of named teacher tensors.

    Layout: ``<root>/manifest`` plus ``<root>/<i // 1000>/<i>.bin``. Entries
    are only trusted once the manifest carries ``complete: true`` and the
    fingerprint matches; anything else is treated as absent.
    """

    _use_dir_fd = os.open in os.supports_dir_fd

    def __init__(self, root: str, length: int, fingerprint: dict):
        self.root = root
        self.length = int(length)
        self.fingerprint = fingerprint
        os.makedirs(root, exist_ok=True)
        self._complete = self._read_manifest_complete()
        self._dir_fds: dict[int, int] = {}

    def close(self):
        for fd in self._dir_fds.values():
            try:
                os.close(fd)
            except OSError:
                pass
        self._dir_fds.clear()

    def __del__(self):
        self.close()

    def _fanout_fd(self, fanout: int) -> int:
        fd = self._dir_fds.get(fanout)
        if fd is None:
            d = os.path.join(self.root, str(fanout))
            os.makedirs(d, exist_ok=True)
            fd = os.open(d, os.O_RDONLY)
            self._dir_fds[fanout] = fd
        return fd

    def _manifest_path(self) -> str:
        return os.path.join(self.root, _MANIFEST)

    def _entry_path(self, index: int) -> str:
        return os.path.join(self.root, str(index // 1000), f"{index}.bin")

    def _read_manifest_complete(self) -> bool:
        try:
            with open(self._manifest_path(), "r", encoding="utf-8") as f:
                manifest = json.load(f)
        except (OSError, ValueError):
            return False
        if manifest.get("fingerprint") != self.fingerprint or manifest.get("length") != self.length:
            warnings.warn(f"cache at {self.root} was written under a different teacher "
                          "configuration; ignoring it")
            return False
        return bool(manifest.get("complete"))

    @property
    def complete(self) -> bool:
        return self._complete

    def mark_complete(self):
        payload = {"fingerprint": self.fingerprint, "length": self.length, "complete": True}
        try:
            tmp = self._manifest_path() + ".tmp"
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(payload, f)
            os.replace(tmp, self._manifest_path())
        except OSError as exc:
            raise StorageError(f"cannot write cache manifest at {self.root}: {exc}") from exc
        self._complete = True

    def put(self, index: int, payload: dict) -> None:
        """payload: name -> tensor. Last write wins; partial files are never
        trusted because the manifest gates reads."""
        if not 0 <= index < self.length:
            raise IndexError(f"cache index {index} outside [0, {self.length})")
        blob = dump_tensors(payload)
        # os-level I/O with directory fds: put runs once per sample, so
        # per-call open overhead sets the epoch-1 write penalty
        flags = os.O_WRONLY | os.O_CREAT | os.O_TRUNC
        try:
            if self._use_dir_fd:
                fd = os.open(f"{index}.bin", flags, dir_fd=self._fanout_fd(index // 1000))
            else:
                path = self._entry_path(index)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                fd = os.open(path, flags)
        except OSError as exc:
            raise StorageError(f"cache write failed for index {index}: {exc}") from exc
        try:
            os.write(fd, blob)
        except OSError as exc:
            raise StorageError(f"cache write failed for index {index}: {exc}") from exc
        finally:
            os.close(fd)

    def get(self, index: int) -> dict:
        try:
            with open(self._entry_path(index), "rb") as f:
                return load_tensors(f.read())
        except OSError as exc:
            raise CacheMissError([index]) from exc

    def get_batch(self, indices) -> dict:
        """Stack per-sample payloads in the given index order.

        Raises CacheMiss listing every absent index; the caller falls back to
        live teacher inference for the batch.
        """
        indices = [int(i) for i in indices]
        missing = [i for i in indices if not os.path.exists(self._entry_path(i))]
        if missing:
            raise CacheMissError(missing)
        per_sample = []
        for i in indices:
            per_sample.append(self.get(i))
        keys = per_sample[0].keys()
        return {k: torch.stack([p[k] for p in per_sample], dim=0) for k in keys}


def cache_put(store: CacheStore, index: int, payload: dict) -> None:
    store.put(index, payload)


def cache_get_batch(store: CacheStore, indices) -> dict:
    return store.get_batch(indices)
