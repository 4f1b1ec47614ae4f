"""Dense-tensor primitives, seeded RNG streams, finite-difference gradient
checking and the binary checkpoint container.

Tensors are plain ``torch.Tensor`` objects; reverse-mode differentiation is
torch autograd. Parameter stores are ``nn.Module`` instances, whose
``named_parameters()`` give an ordered, uniquely named map of value, gradient
and trainable flag.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"S2VC"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


def layer_norm(x: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    if x.shape[-1] < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got {x.shape[-1]}")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps)


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(m).all():
        raise NumericError("softmax_rows received non-finite logits")
    return masked_softmax(m)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis; ``mask`` is True where entries are allowed.

    Every row must keep at least one allowed entry.
    """
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    shifted = logits - logits.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Iterable[tuple[str, torch.Tensor]],
    step: float | None = None,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Worst relative error between autograd and central differences.

    ``f`` re-evaluates the scalar loss from the current parameter values.
    At most ``max_coords`` coordinates are sampled per tensor.
    """
    params = [(name, p) for name, p in params if p.requires_grad]
    for _, p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {name: p.grad.detach().clone() for name, p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params:
        h = 1e-3 if step is None else step
        flat = p.data.view(-1)
        n = flat.numel()
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        g = analytic[name].view(-1)
        for c in coords:
            c = int(c)
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + h
                fp = float(f())
                flat[c] = orig - h
                fm = float(f())
                flat[c] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(g[c])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
            worst = max(worst, err)
    for _, p in params:
        p.grad = None
    return worst


class Rng:
    """Seeded random stream that can be split into independent substreams."""

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self.np = np.random.default_rng(self._seq)
        self.torch = torch.Generator().manual_seed(int(self._seq.generate_state(1, np.uint64)[0] >> 1))

    def split(self, n: int) -> list["Rng"]:
        return [Rng(s) for s in self._seq.spawn(n)]

    def child(self) -> "Rng":
        return self.split(1)[0]


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor] | nn.Module) -> None:
    if isinstance(tensors, nn.Module):
        tensors = dict(tensors.named_parameters())
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).numpy()
        if arr.ndim > 2:
            raise DimensionError(f"{name}: checkpoint entries are at most rank 2")
        rows, cols = (1, arr.shape[0]) if arr.ndim == 1 else arr.shape
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint into ``name -> (rows, cols) float32 array``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        nbytes = 4 * rows * cols
        out[name] = np.frombuffer(buf[off : off + nbytes], dtype="<f4").reshape(rows, cols).copy()
        off += nbytes
    return out


def load_into(module: nn.Module, entries: Mapping[str, np.ndarray], strict: bool = True) -> None:
    params = dict(module.named_parameters())
    missing = [k for k in params if k not in entries]
    if strict and missing:
        raise KeyError(f"checkpoint lacks entries: {missing}")
    with torch.no_grad():
        for name, p in params.items():
            if name in entries:
                arr = torch.from_numpy(entries[name]).reshape(p.shape)
                p.copy_(arr.to(p.dtype))
