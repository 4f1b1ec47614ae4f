"""Synthetic tasks with known ground truth for both stages.

AR task: content tokens in ``[0, content_vocab)`` map to content-style
tokens ``(c + offset(style)) mod style_vocab``; style 3 additionally repeats
every third token. Each style has a prototype vector in reference space and
a reference is a set of noisy frames around it.

With ``accent_tokens > 0`` each reference also carries accent frames, one
per accented content value (a fixed code vector for that value plus
noise), and every output token whose content value is accented is shifted
by ``accent_shift``. Mean-pooling the reference cannot say which positions
are accented; attention from the accent frames to the content can.

Flow task: frame ``t`` of the target is ``mu[token_t] + delta[speaker]``
plus small Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TaskConfig:
    content_vocab: int = 32
    style_vocab: int = 64
    n_styles: int = 4
    offset_step: int = 8
    repeat_style: int = 3
    repeat_every: int = 3
    min_len: int = 4
    max_len: int = 8
    style_dim: int = 8
    ref_frames: int = 6
    ref_noise: float = 0.5
    n_speakers: int = 8
    feat_dim: int = 2
    frame_noise: float = 0.05
    spk_scale: float = 1.0
    accent_tokens: int = 0
    accent_shift: int = 4
    accent_scale: float = 1.5
    accent_noise: float = 0.1
    seed: int = 1234

    @property
    def terminator(self) -> int:
        return self.style_vocab - 1

    @property
    def max_target(self) -> int:
        return self.max_len + self.max_len // self.repeat_every + 1


class SyntheticTask:
    """Fixed world parameters (style prototypes, token means, speaker offsets)
    drawn once from ``cfg.seed``."""

    def __init__(self, cfg: TaskConfig):
        self.cfg = cfg
        shifts = (0, cfg.accent_shift) if cfg.accent_tokens else (0,)
        reachable = {(c + k * cfg.offset_step + a) % cfg.style_vocab
                     for k in range(cfg.n_styles) for c in range(cfg.content_vocab) for a in shifts}
        if cfg.terminator in reachable:
            raise ValueError("style offsets reach the terminator id")
        world = np.random.default_rng(cfg.seed)
        self.prototypes = world.standard_normal((cfg.n_styles, cfg.style_dim))
        self.token_means = world.uniform(-1.0, 1.0, size=(cfg.style_vocab, cfg.feat_dim))
        self.speaker_offsets = cfg.spk_scale * world.uniform(-1.0, 1.0, size=(cfg.n_speakers, cfg.feat_dim))
        self.accent_codes = cfg.accent_scale * world.standard_normal((cfg.content_vocab, cfg.style_dim))

    def offset(self, style: int) -> int:
        return style * self.cfg.offset_step

    def transduce(self, content, style: int, accents=()) -> list[int]:
        return self.transduce_aligned(content, style, accents)[0]

    def transduce_aligned(self, content, style: int, accents=()) -> tuple[list[int], list[int]]:
        """Target tokens plus, per non-terminator output, its content index."""
        cfg = self.cfg
        accents = set(int(a) for a in accents)
        out, src = [], []
        for i, c in enumerate(content):
            tok = (int(c) + self.offset(style) + (cfg.accent_shift if int(c) in accents else 0)) % cfg.style_vocab
            out.append(tok)
            src.append(i)
            if style == cfg.repeat_style and i % cfg.repeat_every == cfg.repeat_every - 1:
                out.append(tok)
                src.append(i)
        out.append(cfg.terminator)
        return out, src

    def local_style_labels(self, content, style: int, accents=()) -> list[int]:
        """Per content position: ``style`` or, if accented, ``n_styles + style``."""
        accents = set(int(a) for a in accents)
        return [style + (self.cfg.n_styles if int(c) in accents else 0) for c in content]

    def sample_content(self, rng: np.random.Generator) -> list[int]:
        n = int(rng.integers(self.cfg.min_len, self.cfg.max_len + 1))
        return rng.integers(0, self.cfg.content_vocab, size=n).tolist()

    def style_reference(self, style: int, rng: np.random.Generator, accents=()) -> np.ndarray:
        cfg = self.cfg
        noise = rng.standard_normal((cfg.ref_frames, cfg.style_dim))
        frames = self.prototypes[style] + cfg.ref_noise * noise
        if cfg.accent_tokens:
            acc = self.accent_codes[np.asarray(accents, dtype=int)]
            acc = acc + cfg.accent_noise * rng.standard_normal(acc.shape)
            frames = np.concatenate([frames, acc])[rng.permutation(cfg.ref_frames + len(acc))]
        return frames.astype(np.float32)

    def sample_accents(self, content, rng: np.random.Generator) -> list[int]:
        """Distinct accented values, drawn from the content where possible."""
        k = self.cfg.accent_tokens
        if not k:
            return []
        present = sorted(set(int(c) for c in content))
        picked = [int(v) for v in rng.choice(present, size=min(k, len(present)), replace=False)]
        while len(picked) < k:
            v = int(rng.integers(self.cfg.content_vocab))
            if v not in picked:
                picked.append(v)
        return sorted(picked)

    def ar_examples(self, n: int, rng: np.random.Generator) -> dict:
        """``n`` examples with styles cycling evenly; returns column lists."""
        contents, styles, accents, refs, targets = [], [], [], [], []
        for i in range(n):
            style = i % self.cfg.n_styles
            c = self.sample_content(rng)
            acc = self.sample_accents(c, rng)
            contents.append(c)
            styles.append(style)
            accents.append(acc)
            refs.append(self.style_reference(style, rng, acc))
            targets.append(self.transduce(c, style, acc))
        return {"content": contents, "style": styles, "accents": accents, "ref": np.stack(refs), "target": targets}

    def frame_mean(self, tokens, speaker: int) -> np.ndarray:
        return self.token_means[np.asarray(tokens)] + self.speaker_offsets[speaker]

    def frames(self, tokens, speaker: int, rng: np.random.Generator) -> np.ndarray:
        mean = self.frame_mean(tokens, speaker)
        return (mean + self.cfg.frame_noise * rng.standard_normal(mean.shape)).astype(np.float32)

    def flow_examples(self, n: int, rng: np.random.Generator) -> dict:
        """Token sequences drawn from the AR task's outputs; (style, speaker)
        tags cycle through the full product."""
        cfg = self.cfg
        tokens, styles, speakers, frames = [], [], [], []
        for i in range(n):
            style = (i // cfg.n_speakers) % cfg.n_styles
            content = self.sample_content(rng)
            toks = self.transduce(content, style, self.sample_accents(content, rng))[:-1]
            spk = i % cfg.n_speakers
            tokens.append(toks)
            styles.append(style)
            speakers.append(spk)
            frames.append(self.frames(toks, spk, rng))
        return {"tokens": tokens, "style": styles, "speaker": speakers, "frames": frames}
