"""Style encoder, FiLM scale/shift generation, FiLM layer norm and
style-query cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numerics import DimensionError, layer_norm, masked_softmax


@dataclass
class StyleReference:
    frames: np.ndarray  # (M, d_s)
    true_style_id: int | None = None

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DimensionError("style reference needs at least one frame")


class StyleEncoder(nn.Module):
    """Toy stand-in for a pretrained reference encoder: ``tanh(F W + b)``."""

    def __init__(self, d_in: int, d_model: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_model))
        self.bias = nn.Parameter(torch.zeros(d_model))
        nn.init.normal_(self.weight, std=1.0 / math.sqrt(d_in))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-1] != self.weight.shape[0]:
            raise DimensionError(
                f"style frames have width {frames.shape[-1]}, encoder expects {self.weight.shape[0]}"
            )
        return torch.tanh(frames @ self.weight + self.bias)


def encode_style(ref: StyleReference, encoder: StyleEncoder) -> torch.Tensor:
    frames = torch.as_tensor(ref.frames, dtype=encoder.weight.dtype)
    return encoder(frames)


class FiLMGenerator(nn.Module):
    """Mean-pools style embeddings, projects to ``d/2`` and emits one
    ``(gamma, beta)`` pair per layer.

    The gamma/beta maps start at zero so an untrained generator is the
    identity modulation.
    """

    def __init__(self, d_model: int, n_layers: int, d_proj: int | None = None):
        super().__init__()
        d_proj = d_proj or d_model // 2
        self.proj = nn.Linear(d_model, d_proj)
        self.layers = nn.ModuleDict()
        for i in range(n_layers):
            layer = nn.ModuleDict({"gamma": nn.Linear(d_proj, d_model), "beta": nn.Linear(d_proj, d_model)})
            for lin in layer.values():
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
            self.layers[f"L{i}"] = layer

    def pooled(self, style: torch.Tensor) -> torch.Tensor:
        return self.proj(style.mean(dim=-2))

    def forward(self, style: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        p = self.pooled(style)
        return [(layer["gamma"](p), layer["beta"](p)) for layer in self.layers.values()]

    def layer_params(self, style: torch.Tensor, layer: int) -> tuple[torch.Tensor, torch.Tensor]:
        if not 0 <= layer < len(self.layers):
            raise IndexError(f"layer {layer} out of range for {len(self.layers)} layers")
        p = self.pooled(style)
        mod = self.layers[f"L{layer}"]
        return mod["gamma"](p), mod["beta"](p)


def film_ln(h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """``(1 + gamma) * LN(h) + beta``; gamma/beta broadcast over positions."""
    if gamma.shape[-1] != h.shape[-1] or beta.shape[-1] != h.shape[-1]:
        raise DimensionError(
            f"film_ln widths differ: h={h.shape[-1]} gamma={gamma.shape[-1]} beta={beta.shape[-1]}"
        )
    return (1 + gamma) * layer_norm(h) + beta


class StyleCrossAttention(nn.Module):
    """Style embeddings are the queries, the latent sequence gives keys and values.

    The ``M`` per-query summaries are redistributed over the ``T`` positions
    through the transposed attention map, so position ``i`` receives
    ``sum_m A[m, i] * (U[m] @ W_O)``.

    With ``causal=True`` each position ``i`` sees the update it would get if
    the latent sequence ended at ``i``: the softmax for that position runs
    over keys ``0..i`` only.
    """

    def __init__(self, d_model: int, heads: int = 1):
        super().__init__()
        if d_model % heads:
            raise DimensionError(f"width {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.wq = nn.Parameter(torch.empty(d_model, d_model))
        self.wk = nn.Parameter(torch.empty(d_model, d_model))
        self.wv = nn.Parameter(torch.empty(d_model, d_model))
        self.wo = nn.Parameter(torch.empty(d_model, d_model))
        for w in (self.wq, self.wk, self.wv, self.wo):
            nn.init.normal_(w, std=1.0 / math.sqrt(d_model))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.heads, d // self.heads).transpose(-3, -2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        x = x.transpose(-3, -2)
        return x.reshape(*x.shape[:-2], -1)

    def attention(self, style: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """Non-causal attention map ``A`` of shape (..., heads, M, T)."""
        q = self._split(style @ self.wq)
        k = self._split(h @ self.wk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        return masked_softmax(scores)

    def forward(self, style: torch.Tensor, h: torch.Tensor, causal: bool = False) -> torch.Tensor:
        if style.shape[-1] != h.shape[-1] or h.shape[-1] != self.wq.shape[0]:
            raise DimensionError(
                f"cross-attention widths differ: style={style.shape[-1]} latent={h.shape[-1]}"
            )
        q = self._split(style @ self.wq)  # (..., H, M, dh)
        k = self._split(h @ self.wk)  # (..., H, T, dh)
        v = self._split(h @ self.wv)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])  # (..., H, M, T)
        if not causal:
            a = masked_softmax(scores)
            u = a @ v  # (..., H, M, dh)
            delta = a.transpose(-1, -2) @ u  # (..., H, T, dh)
        else:
            t = h.shape[-2]
            allowed = torch.ones(t, t, dtype=torch.bool, device=h.device).tril()  # [i, j]: j <= i
            # per-prefix attention maps: (..., H, T_i, M, T_j)
            a = masked_softmax(scores.unsqueeze(-3).expand(*scores.shape[:-2], t, *scores.shape[-2:]),
                               allowed[:, None, :])
            u = a @ v.unsqueeze(-3)  # (..., H, T_i, M, dh)
            own = torch.diagonal(a, dim1=-3, dim2=-1)  # (..., H, M, T_i)
            delta = (own.transpose(-1, -2).unsqueeze(-1) * u).sum(dim=-2)  # (..., H, T_i, dh)
        return self._merge(delta) @ self.wo
