"""Finite-difference checks of the three trainable objectives in float64."""

from __future__ import annotations

import time

import numpy as np
import torch

from .ar import ArConfig, ArModel, ar_nll, make_batch, predicted_logits
from .flow import FlowConfig, FlowDecoder, flow_loss
from .preference import PreferencePair, dpo_loss, pair_scores


def _perturb(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.3) -> None:
    # zero-initialised conditioning would leave whole paths untested
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def tiny_ar(seed: int = 0, width: int = 8, layers: int = 2) -> ArModel:
    torch.manual_seed(seed)
    cfg = ArConfig(layers=layers, width=width, content_vocab=6, style_vocab=10, style_dim=3,
                   max_content=4, max_target=4)
    model = ArModel(cfg).double()
    _perturb(model, torch.Generator().manual_seed(seed))
    return model


def check_ar_block(seed: int = 0) -> float:
    """Full AR stack with FiLM-LN and cross-attention, d=8, L=2, T=4."""
    model = tiny_ar(seed)
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal((2, 3, 3))
    # content of 2 + SEP + 1 prefix token = 4 positions
    batch = make_batch(model.cfg, [[1, 4], [0, 5]], None, ref, targets=[[3, 9], [7, 9]], dtype=torch.float64)
    return _grad_check(lambda: ar_nll(predicted_logits(model, batch), batch.targets), model)


def check_flow_loss(seed: int = 0) -> float:
    """Flow-matching loss at fixed noise and time, F=2, T=3."""
    torch.manual_seed(seed)
    model = FlowDecoder(FlowConfig(vocab=5, feat_dim=2, width=8, layers=2, spk_dim=4, n_speakers=3, time_dim=4)).double()
    gen = torch.Generator().manual_seed(seed)
    _perturb(model, gen)
    tokens = torch.tensor([[0, 3, 4], [2, 2, 1]])
    y1 = torch.randn(2, 3, 2, generator=gen, dtype=torch.float64)
    x0 = torch.randn(2, 3, 2, generator=gen, dtype=torch.float64)
    tau = torch.tensor([0.3, 0.8], dtype=torch.float64)
    return _grad_check(lambda: flow_loss(model.field, y1, tokens, model.speaker_embed([0, 2]), x0=x0, tau=tau), model)


def check_dpo(seed: int = 0) -> float:
    """Sequence scores composed with the pairwise loss."""
    model = tiny_ar(seed)
    rng = np.random.default_rng(seed)
    pairs = [
        PreferencePair([1, 2], rng.standard_normal((3, 3)), [3, 9], [3, 3, 9]),
        PreferencePair([0, 5, 4], rng.standard_normal((3, 3)), [6, 7, 9], [6, 9]),
    ]

    def loss():
        s_pos, s_neg = pair_scores(model, pairs)
        return dpo_loss(s_pos, s_neg).mean()

    return _grad_check(loss, model)


def _grad_check(f, model: torch.nn.Module) -> float:
    from .numerics import grad_check

    return grad_check(f, model.named_parameters())


CHECKS = {"ar_block": check_ar_block, "flow_loss": check_flow_loss, "dpo": check_dpo}


def run_all(seed: int = 0) -> dict:
    out = {}
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        out[name] = {"max_rel_err": fn(seed), "seconds": time.perf_counter() - t0}
    return out
