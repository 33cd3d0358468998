"""Parameters, small feed-forward models, SGD with momentum, and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"LKCK"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


class ParamStore:
    """Ordered named parameters with paired momentum buffers."""

    def __init__(self, arrays: Optional[dict] = None):
        self.params: dict[str, np.ndarray] = {}
        self.velocity: dict[str, np.ndarray] = {}
        for k, v in (arrays or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = value
        self.velocity[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.params[k] = v.copy()
            out.velocity[k] = self.velocity[k].copy()
        return out

    def n_values(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def tensors(self) -> dict:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}


# -- models --------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected stack ``sizes[0] -> ... -> sizes[-1]`` with leaky ReLU between layers."""

    prefix: str
    sizes: tuple
    slope: float = 0.2

    def init(self, store: ParamStore, rng: np.random.Generator, zero_last: bool = False) -> None:
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            scale = np.sqrt(2.0 / ((1 + self.slope ** 2) * n_in))
            w = np.zeros((n_in, n_out)) if (last and zero_last) else rng.normal(0.0, scale, (n_in, n_out))
            store.add(f"{self.prefix}.w{i}", w)
            store.add(f"{self.prefix}.b{i}", np.zeros(n_out))

    def apply(self, p: dict, x, final_activation: bool = False):
        n = len(self.sizes) - 1
        for i in range(n):
            x = ad.matmul(x, p[f"{self.prefix}.w{i}"]) + p[f"{self.prefix}.b{i}"]
            if i < n - 1 or final_activation:
                x = ad.leaky_relu(x, self.slope)
        return x


# -- optimisation ------------------------------------------------------------


def check_finite(name: str, value) -> None:
    arr = np.asarray(value)
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f"non-finite values in {name} ({bad} of {np.size(arr)} entries)")


def sgd_step(store: ParamStore, grads: dict, lr: float, momentum: float) -> ParamStore:
    """In-place classical momentum update ``v <- mu v + g``, ``p <- p - lr v``."""
    for k, g in grads.items():
        if g.shape != store.params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
        check_finite(f"gradient of {k}", g)
    for k, g in grads.items():
        v = momentum * store.velocity[k] + g
        store.velocity[k] = v
        store.params[k] = store.params[k] - lr * v
    return store


def clip_by_global_norm(grads: dict, max_norm: Optional[float]) -> float:
    """Scale gradients in place so their joint norm is at most ``max_norm``; returns the norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and total > max_norm:
        s = max_norm / total
        for k in grads:
            grads[k] = grads[k] * s
    return total


@dataclass
class Plateau:
    """Tenfold learning-rate decay when the windowed mean loss stops improving."""

    lr: float
    window: int = 100
    patience: int = 300
    max_decays: int = 2
    factor: float = 0.1
    history: list = field(default_factory=list)
    best: float = np.inf
    since_best: int = 0
    decays: int = 0

    def update(self, loss: float) -> bool:
        """Record one iteration's loss. Returns True when training should stop."""
        self.history.append(loss)
        if len(self.history) > self.window:
            self.history.pop(0)
        if len(self.history) < self.window:
            return False
        m = float(np.mean(self.history))
        if m < self.best:
            self.best, self.since_best = m, 0
            return False
        self.since_best += 1
        if self.since_best >= self.patience:
            if self.decays >= self.max_decays:
                return True
            self.decays += 1
            self.lr *= self.factor
            self.since_best = 0
            self.best = m
        return False


# -- checkpoint container ----------------------------------------------------
#
# magic "LKCK", u32 version, u32 header length, UTF-8 JSON header, then every
# tensor listed in header["tensors"] as little-endian float64 in that order.


def save_checkpoint(path, stores: dict, meta: dict) -> None:
    from ..io import atomic_write_bytes

    entries, blobs = [], []
    for group, store in stores.items():
        for name, value in store.items():
            entries.append({"group": group, "name": name, "shape": list(value.shape)})
            blobs.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    data = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)
    atomic_write_bytes(path, data)


def load_checkpoint(path):
    """Returns ``(stores, meta)`` with one :class:`ParamStore` per group."""
    from ..io import FormatError

    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode())
    offset = 12 + hlen
    stores: dict[str, ParamStore] = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if offset + 8 * n > len(data):
            raise FormatError("checkpoint truncated")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(e["shape"]).astype(np.float64)
        offset += 8 * n
        stores.setdefault(e["group"], ParamStore()).add(e["name"], arr)
    if offset != len(data):
        raise FormatError("trailing bytes in checkpoint")
    return stores, header["meta"]
