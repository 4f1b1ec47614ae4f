"""Desk-scale evaluation: exact match, linear style probes, failure-mode
rates and flow-decoder fidelity."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from .ar import ArModel, Generation, ar_generate
from .flow import FlowDecoder, ode_sample
from .synthetic import SyntheticTask

FAILURE_KINDS = ("truncated", "early_stop", "repetition", "jitter")


def style_tensor(model: ArModel, refs: np.ndarray, zero: bool = False) -> torch.Tensor:
    with torch.no_grad():
        s = model.encode_style(torch.as_tensor(np.asarray(refs), dtype=torch.float32))
    return torch.zeros_like(s) if zero else s


def generate(model: ArModel, data: dict, zero_style: bool = False, batch_size: int = 512, **kw) -> list[Generation]:
    out = []
    was_training = model.training
    model.eval()
    for i in range(0, len(data["content"]), batch_size):
        sl = slice(i, i + batch_size)
        style = style_tensor(model, data["ref"][sl], zero_style)
        out.extend(ar_generate(model, data["content"][sl], None, style=style, **kw))
    model.train(was_training)
    return out


def exact_match(gens: Sequence[Generation], targets: Sequence[Sequence[int]]) -> float:
    return float(np.mean([g.tokens == list(t) for g, t in zip(gens, targets)]))


def classify_failure(tokens: Sequence[int], target: Sequence[int], truncated: bool, terminator: int) -> str | None:
    """Failure kind of one generation against its reference output, or None if it matches."""
    tokens, target = list(tokens), list(target)
    if tokens == target:
        return None
    if truncated:
        return "truncated"
    if len(tokens) < len(target):
        return "early_stop"
    if len(tokens) > len(target):
        return "repetition"
    return "jitter"


def failure_rates(gens: Sequence[Generation], targets: Sequence[Sequence[int]], terminator: int) -> dict:
    kinds = Counter(classify_failure(g.tokens, t, g.truncated, terminator) for g, t in zip(gens, targets))
    n = max(len(gens), 1)
    rates = {k: kinds.get(k, 0) / n for k in FAILURE_KINDS}
    # abrupt cuts and over-generation: the modes preference tuning targets
    rates["length_failure"] = (kinds.get("truncated", 0) + kinds.get("early_stop", 0) + kinds.get("repetition", 0)) / n
    return rates


def _fit_probe(x: np.ndarray, y: np.ndarray) -> LogisticRegression:
    return LogisticRegression(C=10.0, max_iter=2000).fit(x, y)


def _diff_features(diffs: Sequence[int], vocab: int) -> np.ndarray:
    x = np.zeros((len(diffs), vocab))
    x[np.arange(len(diffs)), np.asarray(diffs, dtype=int) % vocab] = 1.0
    return x


def style_probe_accuracy(task: SyntheticTask, probe_data: dict, eval_data: dict,
                         gens: Sequence[Generation]) -> float:
    """Per-position accuracy of a linear probe that reads the local style
    (global style, and accent where enabled) off generated tokens.

    The probe is fit on reference outputs of ``probe_data``; each generated
    token is compared with the content token it should realise.
    """
    vocab = task.cfg.style_vocab
    xs, ys = [], []
    for c, s, a in zip(probe_data["content"], probe_data["style"], probe_data["accents"]):
        tokens, src = task.transduce_aligned(c, s, a)
        labels = task.local_style_labels(c, s, a)
        xs.extend((tokens[k] - c[src[k]]) for k in range(len(src)))
        ys.extend(labels[src[k]] for k in range(len(src)))
    probe = _fit_probe(_diff_features(xs, vocab), np.asarray(ys))

    correct, total = 0, 0
    for c, s, a, g in zip(eval_data["content"], eval_data["style"], eval_data["accents"], gens):
        _, src = task.transduce_aligned(c, s, a)
        labels = task.local_style_labels(c, s, a)
        present = [k for k in range(len(src)) if k < len(g.tokens)]
        total += len(src)
        if present:
            pred = probe.predict(_diff_features([g.tokens[k] - c[src[k]] for k in present], vocab))
            correct += int(sum(p == labels[src[k]] for p, k in zip(pred, present)))
    return correct / max(total, 1)


def encoder_probe_accuracy(model: ArModel, probe_data: dict, eval_data: dict) -> float:
    """Linear probe from mean-pooled style embeddings to the style id."""
    fit_x = style_tensor(model, probe_data["ref"]).mean(dim=1).numpy()
    ev_x = style_tensor(model, eval_data["ref"]).mean(dim=1).numpy()
    probe = _fit_probe(fit_x, np.asarray(probe_data["style"]))
    return float(np.mean(probe.predict(ev_x) == np.asarray(eval_data["style"])))


@torch.no_grad()
def sample_mean(model: FlowDecoder, tokens: Sequence[int], speaker: int, n: int, steps: int,
                generator: torch.Generator, x0: torch.Tensor | None = None) -> np.ndarray:
    tok = torch.as_tensor(list(tokens), dtype=torch.long)[None].repeat(n, 1)
    spk = model.speaker_embed([speaker] * n)
    x = ode_sample(model.field, tok, spk, steps, model.cfg.feat_dim, generator, x0=x0)
    return x.mean(dim=0).double().numpy()


@torch.no_grad()
def flow_metrics(model: FlowDecoder, task: SyntheticTask, token_seqs: Sequence[Sequence[int]],
                 n_samples: int, steps: int, seed: int) -> dict:
    """Sample-mean error against the generator, speaker-swap shift error,
    N vs 2N Euler agreement and speaker-vector separation."""
    gen = torch.Generator().manual_seed(seed)
    n_spk = task.cfg.n_speakers
    mean_errs, shift_errs, conv = [], [], []
    for i, toks in enumerate(token_seqs):
        a = i % n_spk
        b = (a + 1 + i // n_spk) % n_spk
        if b == a:
            b = (a + 1) % n_spk
        x0 = torch.randn(n_samples, len(toks), model.cfg.feat_dim, generator=gen)
        ma = sample_mean(model, toks, a, n_samples, steps, gen, x0)
        mb = sample_mean(model, toks, b, n_samples, steps, gen, x0)
        mean_errs.append(np.abs(ma - task.frame_mean(toks, a)).max())
        expected = task.speaker_offsets[a] - task.speaker_offsets[b]
        shift_errs.append(np.abs((ma - mb) - expected))
        tok = torch.as_tensor(list(toks))[None].repeat(n_samples, 1)
        spk = model.speaker_embed([a] * n_samples)
        x_n = ode_sample(model.field, tok, spk, steps, model.cfg.feat_dim, x0=x0)
        x_2n = ode_sample(model.field, tok, spk, 2 * steps, model.cfg.feat_dim, x0=x0)
        conv.append(float(torch.sqrt(((x_n - x_2n) ** 2).mean())))
    shift = np.concatenate([s.ravel() for s in shift_errs])
    emb = model.speaker_embed(list(range(n_spk))).double()
    cos = (emb @ emb.T).numpy()
    off_diag = cos[~np.eye(n_spk, dtype=bool)]
    return {
        "sample_mean_max_err": float(np.max(mean_errs)),
        "speaker_shift_max_err": float(shift.max()),
        "speaker_shift_mean_err": float(shift.mean()),
        "euler_n_vs_2n_rms": float(np.max(conv)),
        "speaker_cos_max": float(off_diag.max()),
        "speaker_cos_mean": float(off_diag.mean()),
    }
