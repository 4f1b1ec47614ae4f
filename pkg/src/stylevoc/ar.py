"""Decoder-only token transducer with FiLM layer norms and style cross-attention.

The content tokens are a prefix: the model reads ``[content, SEP, target...]``
and predicts target tokens from the separator onward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DimensionError, NumericError, layer_norm, masked_softmax
from .style import FiLMGenerator, StyleCrossAttention, StyleEncoder, film_ln

LN_SITES = ("self", "cross", "mlp")


@dataclass
class ArConfig:
    layers: int = 2
    width: int = 32
    heads: int = 1
    content_vocab: int = 32
    style_vocab: int = 64
    style_dim: int = 8
    max_content: int = 8
    max_target: int = 12
    film_on: bool = True
    xattn_on: bool = True
    # which LN sites inside a block receive FiLM
    film_mask: tuple[bool, bool, bool] = (True, True, True)
    mlp_mult: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise DimensionError(f"width {self.width} not divisible by heads {self.heads}")
        self.film_mask = tuple(bool(b) for b in self.film_mask)

    @property
    def terminator(self) -> int:
        return self.style_vocab - 1

    @property
    def separator(self) -> int:
        return self.content_vocab

    @property
    def max_positions(self) -> int:
        return self.max_content + 1 + self.max_target


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (z.reshape(b, t, self.heads, d // self.heads).transpose(1, 2) for z in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        causal = torch.ones(t, t, dtype=torch.bool, device=x.device).tril()
        y = masked_softmax(scores, causal) @ v
        return self.out(y.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    """SelfAttn -> style CrossAttn -> MLP, each behind a (FiLM-)LN with a residual."""

    def __init__(self, cfg: ArConfig):
        super().__init__()
        d = cfg.width
        self.attn = SelfAttention(d, cfg.heads)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_mult * d), nn.GELU(), nn.Linear(cfg.mlp_mult * d, d))

    def forward(self, h, film=None, film_mask=(True, True, True), xattn=None, style=None):
        def norm(x, site):
            if film is not None and film_mask[site]:
                gamma, beta = film
                return film_ln(x, gamma[:, None, :], beta[:, None, :])
            return layer_norm(x)

        h = h + self.attn(norm(h, 0))
        if xattn is not None:
            h = h + xattn(style, norm(h, 1), causal=True)
        return h + self.mlp(norm(h, 2))


class ArCore(nn.Module):
    def __init__(self, cfg: ArConfig):
        super().__init__()
        d = cfg.width
        self.content_emb = nn.Embedding(cfg.content_vocab + 1, d)
        self.target_emb = nn.Embedding(cfg.style_vocab, d)
        self.pos_emb = nn.Embedding(cfg.max_positions, d)
        for emb in (self.content_emb, self.target_emb, self.pos_emb):
            nn.init.normal_(emb.weight, std=0.5)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.head = nn.Linear(d, cfg.style_vocab)


class ArModel(nn.Module):
    """Style encoder + FiLM generator + per-layer style cross-attention + core.

    Parameter names fall under ``style_enc.*``, ``film.*``, ``xattn.*`` and
    ``ar.*``.
    """

    def __init__(self, cfg: ArConfig):
        super().__init__()
        self.cfg = cfg
        self.style_enc = StyleEncoder(cfg.style_dim, cfg.width)
        self.film = FiLMGenerator(cfg.width, cfg.layers)
        self.xattn = nn.ModuleDict({f"L{i}": StyleCrossAttention(cfg.width, cfg.heads) for i in range(cfg.layers)})
        self.ar = ArCore(cfg)

    def encode_style(self, frames: torch.Tensor) -> torch.Tensor:
        return self.style_enc(frames)

    def hidden(self, seq: torch.Tensor, is_content: torch.Tensor, style: torch.Tensor | None) -> torch.Tensor:
        """Final hidden states for a padded ``[content, SEP, target]`` batch."""
        cfg = self.cfg
        t = seq.shape[1]
        if t > cfg.max_positions:
            raise DimensionError(f"sequence length {t} exceeds {cfg.max_positions} positions")
        c_ids = torch.where(is_content, seq, torch.zeros_like(seq))
        s_ids = torch.where(is_content, torch.zeros_like(seq), seq)
        h = torch.where(is_content[..., None], self.ar.content_emb(c_ids), self.ar.target_emb(s_ids))
        h = h + self.ar.pos_emb.weight[:t]
        films = self.film(style) if cfg.film_on else [None] * cfg.layers
        for i, block in enumerate(self.ar.blocks):
            xattn = self.xattn[f"L{i}"] if cfg.xattn_on else None
            h = block(h, films[i], cfg.film_mask, xattn, style)
        return h

    def forward(self, seq, is_content, style):
        return self.ar.head(self.hidden(seq, is_content, style))


@dataclass
class Batch:
    seq: torch.Tensor  # (B, T) long
    is_content: torch.Tensor  # (B, T) bool
    sep_index: torch.Tensor  # (B,) position of SEP
    n_pred: torch.Tensor  # (B,) number of predicted positions
    targets: torch.Tensor  # (B, P) long, -100 padded
    style: torch.Tensor  # (B, M, d_s)


def _check_tokens(tokens: Sequence[int], vocab: int, what: str) -> None:
    if len(tokens) == 0:
        raise ValueError(f"{what} sequence is empty")
    for tok in tokens:
        if not 0 <= int(tok) < vocab:
            raise ValueError(f"{what} token {tok} outside [0, {vocab})")


def make_batch(
    cfg: ArConfig,
    contents: Sequence[Sequence[int]],
    prefixes: Sequence[Sequence[int]],
    style_frames: np.ndarray | torch.Tensor,
    targets: Sequence[Sequence[int]] | None = None,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Pack examples as ``[content, SEP, prefix]``; logits are read from SEP onward.

    With ``targets`` given, ``prefixes`` are ignored and the prefix is every
    target token but the last (teacher forcing).
    """
    if targets is not None:
        prefixes = [list(t[:-1]) for t in targets]
    rows, flags, seps, npred = [], [], [], []
    for c, p in zip(contents, prefixes):
        _check_tokens(c, cfg.content_vocab, "content")
        if len(p):
            _check_tokens(p, cfg.style_vocab, "target")
        if len(c) > cfg.max_content or len(p) + 1 > cfg.max_target:
            raise DimensionError("sequence longer than configured maximum")
        rows.append(list(c) + [cfg.separator] + list(p))
        flags.append([True] * (len(c) + 1) + [False] * len(p))
        seps.append(len(c))
        npred.append(len(p) + 1)
    t = max(len(r) for r in rows)
    seq = torch.zeros(len(rows), t, dtype=torch.long)
    is_content = torch.zeros(len(rows), t, dtype=torch.bool)
    for i, (r, fl) in enumerate(zip(rows, flags)):
        seq[i, : len(r)] = torch.tensor(r)
        is_content[i, : len(fl)] = torch.tensor(fl)
    p_max = max(npred)
    tgt = torch.full((len(rows), p_max), -100, dtype=torch.long)
    if targets is not None:
        for i, tt in enumerate(targets):
            _check_tokens(tt, cfg.style_vocab, "target")
            tgt[i, : len(tt)] = torch.tensor(list(tt))
    style = torch.as_tensor(np.asarray(style_frames), dtype=dtype)
    return Batch(seq, is_content, torch.tensor(seps), torch.tensor(npred), tgt, style)


def predicted_logits(model: ArModel, batch: Batch, style: torch.Tensor | None = None) -> torch.Tensor:
    """Logits at the predicted positions, shape (B, P, V); rows past ``n_pred`` are padding."""
    if style is None:
        style = model.encode_style(batch.style)
    logits = model(batch.seq, batch.is_content, style)
    p_max = int(batch.n_pred.max())
    idx = batch.sep_index[:, None] + torch.arange(p_max)[None, :]
    idx = idx.clamp(max=logits.shape[1] - 1)
    return torch.gather(logits, 1, idx[..., None].expand(-1, -1, logits.shape[-1]))


def ar_forward(model: ArModel, content, target_prefix, style_emb: torch.Tensor) -> torch.Tensor:
    """Next-token logits (len(prefix)+1, V) for one example given style embeddings (M, d)."""
    cfg = model.cfg
    dummy = np.zeros((1, 1, cfg.style_dim))
    batch = make_batch(cfg, [content], [target_prefix], dummy)
    return predicted_logits(model, batch, style=style_emb[None])[0]


def ar_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token NLL; targets of -100 are ignored."""
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


def sequence_logprob(model: ArModel, batch: Batch, style: torch.Tensor | None = None) -> torch.Tensor:
    """Per-example summed log-likelihood of ``batch.targets``, shape (B,)."""
    logits = predicted_logits(model, batch, style)
    logp = torch.log_softmax(logits, dim=-1)
    mask = batch.targets != -100
    picked = torch.gather(logp, 2, batch.targets.clamp(min=0)[..., None])[..., 0]
    return (picked * mask).sum(dim=1)


@dataclass
class Generation:
    tokens: list[int]
    truncated: bool


@torch.no_grad()
def ar_generate(
    model: ArModel,
    contents: Sequence[Sequence[int]],
    style_frames: np.ndarray | torch.Tensor,
    mode: str = "greedy",
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
    style: torch.Tensor | None = None,
) -> list[Generation]:
    """Decode until the terminator or ``max_target`` tokens.

    Sequences that hit the length limit come back with ``truncated=True``.
    ``temperature <= 0`` in sample mode falls back to greedy.
    """
    cfg = model.cfg
    n = len(contents)
    if style is None:
        style = model.encode_style(torch.as_tensor(np.asarray(style_frames), dtype=torch.float32))
    out: list[list[int]] = [[] for _ in range(n)]
    done = [False] * n
    greedy = mode == "greedy" or temperature <= 0
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    for _ in range(cfg.max_target):
        live = [i for i in range(n) if not done[i]]
        if not live:
            break
        batch = make_batch(cfg, [contents[i] for i in live], [out[i] for i in live], np.zeros((len(live), 1, 1)))
        logits = model(batch.seq, batch.is_content, style[live])
        last = batch.sep_index + batch.n_pred - 1
        step = logits[torch.arange(len(live)), last]
        if greedy:
            nxt = step.argmax(dim=-1)
        else:
            probs = torch.softmax(step / temperature, dim=-1)
            nxt = torch.multinomial(probs, 1, generator=generator)[:, 0]
        for j, i in enumerate(live):
            tok = int(nxt[j])
            out[i].append(tok)
            if tok == cfg.terminator:
                done[i] = True
    return [Generation(toks, truncated=not done[i]) for i, toks in enumerate(out)]


def sft_step_ar(model: ArModel, optimizer: torch.optim.Optimizer, batch: Batch, lr: float | None = None,
                batch_ids: Sequence[int] | None = None) -> float:
    if lr is not None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        for g in optimizer.param_groups:
            g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss = ar_nll(predicted_logits(model, batch), batch.targets)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite AR loss on batch {list(batch_ids) if batch_ids is not None else '?'}")
    loss.backward()
    optimizer.step()
    return loss.item()


def adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)
