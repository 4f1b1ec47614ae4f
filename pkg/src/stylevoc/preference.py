"""Pairwise preference fine-tuning of the AR model on good/bad output pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .ar import ArModel, make_batch, sequence_logprob
from .numerics import NumericError

DEGRADATIONS = ("truncate", "repeat", "jitter", "early_stop")


class DegradationError(ValueError):
    """The requested degradation cannot be applied to this sequence."""


@dataclass
class DegradationSpec:
    kind: str
    strength: float = 0.5

    def __post_init__(self):
        if self.kind not in DEGRADATIONS:
            raise ValueError(f"unknown degradation {self.kind!r}")
        if not 0 < self.strength <= 1:
            raise ValueError("strength must lie in (0, 1]")


@dataclass
class PreferencePair:
    content: list[int]
    style_ref: np.ndarray
    pos: list[int]
    neg: list[int]
    kind: str = "model"

    def __post_init__(self):
        if not self.pos or not self.neg:
            raise ValueError("preference sequences must be nonempty")
        if list(self.pos) == list(self.neg):
            raise ValueError("positive and negative sequences are identical")


def make_negatives(x_pos: Sequence[int], spec: DegradationSpec, rng: np.random.Generator,
                   vocab: int, terminator: int) -> list[int]:
    """Degrade a reference output into a bad case of the given kind.

    ``truncate`` drops a suffix (terminator included), ``repeat`` duplicates a
    span, ``jitter`` resamples tokens and ``early_stop`` places the
    terminator early.
    """
    x = [int(t) for t in x_pos]
    if len(x) < 2:
        raise DegradationError(f"{spec.kind}: sequence of length {len(x)} is too short")
    body = x[:-1] if x[-1] == terminator else x
    tail = x[len(body):]
    n = len(body)
    if spec.kind == "truncate":
        keep = min(len(x) - 1, max(1, int(len(x) * (1 - spec.strength))))
        out = x[:keep]
    elif spec.kind == "repeat":
        if n < 1:
            raise DegradationError("repeat: no body tokens")
        span = max(1, round(spec.strength * n / 2))
        start = int(rng.integers(0, n - span + 1))
        end = start + span
        out = body[:end] + body[start:end] + body[end:] + tail
    elif spec.kind == "jitter":
        if n < 1:
            raise DegradationError("jitter: no body tokens")
        k = max(1, round(spec.strength * n))
        out = list(body)
        for i in rng.choice(n, size=k, replace=False):
            choices = [t for t in range(vocab) if t not in (out[i], terminator)]
            out[int(i)] = int(rng.choice(choices))
        out = out + tail
    else:  # early_stop
        if n < 2:
            raise DegradationError("early_stop: needs at least two body tokens")
        cut = min(n - 1, max(1, int(n * (1 - spec.strength))))
        out = body[:cut] + [terminator]
    if out == x:
        raise DegradationError(f"{spec.kind}: degradation left the sequence unchanged")
    return out


def dpo_loss(s_pos: torch.Tensor, s_neg: torch.Tensor, beta: float | None = None,
             ref_pos: torch.Tensor | None = None, ref_neg: torch.Tensor | None = None) -> torch.Tensor:
    """``-log(exp(s_pos) / (exp(s_pos) + exp(s_neg)))`` as ``softplus(s_neg - s_pos)``.

    Passing ``beta`` with reference scores switches to the reference-ratio
    form ``softplus(-beta * ((s_pos - ref_pos) - (s_neg - ref_neg)))``.
    """
    s_pos = torch.as_tensor(s_pos)
    s_neg = torch.as_tensor(s_neg)
    if beta is None:
        return F.softplus(s_neg - s_pos)
    if ref_pos is None or ref_neg is None:
        raise ValueError("the reference-ratio form needs reference scores")
    margin = (s_pos - ref_pos) - (s_neg - ref_neg)
    return F.softplus(-beta * margin)


def pair_scores(model: ArModel, pairs: Sequence[PreferencePair], length_norm: bool = False):
    """Summed log-likelihood scores ``(s_pos, s_neg)`` for a list of pairs."""
    cfg = model.cfg
    contents = [p.content for p in pairs]
    refs = np.stack([p.style_ref for p in pairs])
    style = model.encode_style(torch.as_tensor(refs, dtype=next(model.parameters()).dtype))
    scores = []
    for side in ("pos", "neg"):
        seqs = [getattr(p, side) for p in pairs]
        batch = make_batch(cfg, contents, None, refs, targets=seqs)
        s = sequence_logprob(model, batch, style)
        if length_norm:
            s = s / torch.tensor([len(q) for q in seqs], dtype=s.dtype)
        scores.append(s)
    return scores[0], scores[1]


def score(model: ArModel, tokens: Sequence[int], content: Sequence[int], style_ref: np.ndarray) -> torch.Tensor:
    """Summed log-likelihood of one content-style sequence."""
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    batch = make_batch(cfg, [content], None, np.asarray(style_ref)[None], targets=[list(tokens)], dtype=dtype)
    return sequence_logprob(model, batch)[0]


def dpo_step(model: ArModel, optimizer: torch.optim.Optimizer, pairs: Sequence[PreferencePair],
             lr: float | None = None, length_norm: bool = False, beta: float | None = None,
             ref_model: ArModel | None = None) -> float:
    """One optimizer step on the mean pairwise loss; only ``model``'s parameters move.

    ``beta`` with a frozen ``ref_model`` selects the reference-ratio loss.
    """
    if lr is not None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        for g in optimizer.param_groups:
            g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    s_pos, s_neg = pair_scores(model, pairs, length_norm)
    if beta is None:
        loss = dpo_loss(s_pos, s_neg).mean()
    else:
        if ref_model is None:
            raise ValueError("the reference-ratio loss needs a reference model")
        with torch.no_grad():
            r_pos, r_neg = pair_scores(ref_model, pairs, length_norm)
        loss = dpo_loss(s_pos, s_neg, beta, r_pos, r_neg).mean()
    if not torch.isfinite(loss):
        raise NumericError("non-finite preference loss")
    loss.backward()
    optimizer.step()
    return loss.item()


@torch.no_grad()
def mean_margin(model: ArModel, pairs: Sequence[PreferencePair], batch_size: int = 256) -> float:
    margins = []
    for i in range(0, len(pairs), batch_size):
        s_pos, s_neg = pair_scores(model, pairs[i : i + batch_size])
        margins.append((s_pos - s_neg).double())
    return float(torch.cat(margins).mean())
