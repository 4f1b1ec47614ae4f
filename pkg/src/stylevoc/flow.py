"""Speaker-conditioned flow-matching decoder over frame features.

The vector field is a per-frame residual MLP: each frame sees its own state,
its content-style token, the flow time and the global speaker embedding
(through FiLM on the field's layer norms). Frames never mix, so a token only
influences its own frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .numerics import DimensionError, NumericError, layer_norm
from .style import film_ln


@dataclass
class FlowConfig:
    vocab: int = 64
    feat_dim: int = 2
    width: int = 64
    layers: int = 3
    spk_dim: int = 32
    n_speakers: int = 8
    time_dim: int = 16
    spk_on: bool = True


class SpeakerTable(nn.Module):
    """Learned per-speaker vectors standing in for a speaker-verification encoder."""

    def __init__(self, n_speakers: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_speakers, dim))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.weight.shape[0]):
            raise KeyError(f"speaker id outside [0, {self.weight.shape[0]})")
        return normalize_speaker(self.weight[ids])


def normalize_speaker(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def time_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of ``tau`` in [0, 1], shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=tau.dtype) * (math.log(1000.0) / max(half - 1, 1)))
    ang = tau[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class FieldLayer(nn.Module):
    def __init__(self, width: int, spk_dim: int):
        super().__init__()
        self.gamma = nn.Linear(spk_dim, width)
        self.beta = nn.Linear(spk_dim, width)
        for lin in (self.gamma, self.beta):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, h, spk):
        if spk is None:
            x = layer_norm(h)
        else:
            x = film_ln(h, self.gamma(spk)[:, None, :], self.beta(spk)[:, None, :])
        return h + self.mlp(x)


class FlowDecoder(nn.Module):
    """Parameters live under ``flow.*`` and ``spk.*``."""

    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        self.flow = nn.ModuleDict({
            "tok_emb": nn.Embedding(cfg.vocab, cfg.width),
            "x_in": nn.Linear(cfg.feat_dim, cfg.width),
            "t_in": nn.Linear(cfg.time_dim, cfg.width),
            "layers": nn.ModuleList(FieldLayer(cfg.width, cfg.spk_dim) for _ in range(cfg.layers)),
            "out": nn.Linear(cfg.width, cfg.feat_dim),
        })
        self.spk = SpeakerTable(cfg.n_speakers, cfg.spk_dim)

    def speaker_embed(self, ids) -> torch.Tensor:
        return self.spk(torch.as_tensor(ids, dtype=torch.long))

    def field(self, x: torch.Tensor, tau: torch.Tensor, tokens: torch.Tensor, spk: torch.Tensor | None) -> torch.Tensor:
        """Vector field for a batch: x (B, T, F), tau (B,), tokens (B, T), spk (B, d_spk)."""
        if x.shape[-1] != self.cfg.feat_dim or x.shape[:2] != tokens.shape:
            raise DimensionError(f"state {tuple(x.shape)} does not fit tokens {tuple(tokens.shape)}")
        f = self.flow
        h = f["x_in"](x) + f["tok_emb"](tokens) + f["t_in"](time_embedding(tau, self.cfg.time_dim))[:, None, :]
        if not self.cfg.spk_on:
            spk = None
        for layer in f["layers"]:
            h = layer(h, spk)
        return f["out"](h)

    forward = field


FieldFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor | None], torch.Tensor]


@dataclass
class FlowBatch:
    tokens: torch.Tensor  # (B, T) long, 0-padded
    frames: torch.Tensor  # (B, T, F)
    mask: torch.Tensor  # (B, T) bool
    speakers: torch.Tensor  # (B,) long


def make_flow_batch(tokens: Sequence[Sequence[int]], frames: Sequence[np.ndarray], speakers: Sequence[int],
                    feat_dim: int, dtype: torch.dtype = torch.float32) -> FlowBatch:
    t = max(len(z) for z in tokens)
    b = len(tokens)
    tok = torch.zeros(b, t, dtype=torch.long)
    y = torch.zeros(b, t, feat_dim, dtype=dtype)
    mask = torch.zeros(b, t, dtype=torch.bool)
    for i, (z, fr) in enumerate(zip(tokens, frames)):
        if len(fr) != len(z):
            raise DimensionError(f"example {i}: {len(fr)} frames for {len(z)} tokens")
        tok[i, : len(z)] = torch.as_tensor(list(z))
        y[i, : len(z)] = torch.as_tensor(np.asarray(fr), dtype=dtype)
        mask[i, : len(z)] = True
    return FlowBatch(tok, y, mask, torch.as_tensor(list(speakers), dtype=torch.long))


def flow_loss(
    field: FieldFn,
    y1: torch.Tensor,
    tokens: torch.Tensor,
    spk: torch.Tensor | None,
    generator: torch.Generator | None = None,
    mask: torch.Tensor | None = None,
    x0: torch.Tensor | None = None,
    tau: torch.Tensor | None = None,
) -> torch.Tensor:
    """Conditional flow-matching loss on the straight path ``x0 -> y1``.

    Per example the squared residual is summed over frames and features,
    then averaged over the batch.
    """
    if x0 is None:
        x0 = torch.randn(y1.shape, generator=generator, dtype=y1.dtype)
    if tau is None:
        tau = torch.rand(y1.shape[0], generator=generator, dtype=y1.dtype)
    tb = tau[:, None, None]
    xt = (1 - tb) * x0 + tb * y1
    resid = field(xt, tau, tokens, spk) - (y1 - x0)
    sq = resid.pow(2).sum(dim=-1)
    if mask is not None:
        sq = sq * mask
    return sq.sum(dim=-1).mean()


def batch_flow_loss(model: FlowDecoder, batch: FlowBatch, generator: torch.Generator | None = None) -> torch.Tensor:
    spk = model.speaker_embed(batch.speakers)
    return flow_loss(model.field, batch.frames, batch.tokens, spk, generator, batch.mask)


@torch.no_grad()
def ode_sample(
    field: FieldFn,
    tokens: torch.Tensor,
    spk: torch.Tensor | None,
    steps: int,
    feat_dim: int,
    generator: torch.Generator | None = None,
    x0: torch.Tensor | None = None,
) -> torch.Tensor:
    """Forward Euler from ``x0 ~ N(0, I)`` at tau=0 to tau=1 in ``steps`` steps."""
    if steps < 1:
        raise ValueError("need at least one integration step")
    if x0 is None:
        x0 = torch.randn(*tokens.shape, feat_dim, generator=generator)
    x = x0.clone()
    h = 1.0 / steps
    for k in range(steps):
        tau = torch.full((x.shape[0],), k * h, dtype=x.dtype)
        x = x + h * field(x, tau, tokens, spk)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite flow state at Euler step {k}")
    return x


def sft_step_flow(model: FlowDecoder, optimizer: torch.optim.Optimizer, batch: FlowBatch,
                  generator: torch.Generator | None = None, lr: float | None = None) -> float:
    if lr is not None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        for g in optimizer.param_groups:
            g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss = batch_flow_loss(model, batch, generator)
    if not torch.isfinite(loss):
        raise NumericError("non-finite flow loss")
    loss.backward()
    optimizer.step()
    return loss.item()


def write_frames_csv(dest, frames: np.ndarray) -> None:
    """One frame per line, 9 significant digits; ``dest`` is a path or text stream."""
    lines = "".join(",".join(f"{float(v):.9g}" for v in row) + "\n" for row in np.asarray(frames))
    if hasattr(dest, "write"):
        dest.write(lines)
    else:
        Path(dest).write_text(lines, encoding="utf-8")
