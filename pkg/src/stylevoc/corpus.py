"""Manifest-level corpus curation: multi-ASR hypothesis fusion, quality
gates, deduplication and stratified balancing.

Vocal separation and transcript refinement are stages with identity default
implementations so external models can be dropped in.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


@dataclass
class Hypothesis:
    system_id: str
    tokens: list[str]
    confidences: list[float]

    def __post_init__(self):
        if len(self.tokens) != len(self.confidences):
            raise ValueError(f"{self.system_id}: {len(self.tokens)} tokens but {len(self.confidences)} confidences")
        if any(not 0.0 <= c <= 1.0 for c in self.confidences):
            raise ValueError(f"{self.system_id}: confidences must lie in [0, 1]")

    @property
    def mean_confidence(self) -> float:
        return float(np.mean(self.confidences)) if self.confidences else 0.0


@dataclass
class Quality:
    mos_like: float | None = None
    energy: float | None = None
    pitch_stability: float | None = None
    noise_ratio: float | None = None


@dataclass
class SegmentRecord:
    id: str
    audio_path: str
    duration_s: float
    hypotheses: list[Hypothesis] = field(default_factory=list)
    quality: Quality = field(default_factory=Quality)
    style: str = ""
    gender: str = ""
    language: str = ""
    transcript: str | None = None

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError(f"{self.id}: duration must be positive")
        if self.transcript is None and not self.hypotheses:
            raise ValueError(f"{self.id}: needs a transcript or at least one hypothesis")

    @classmethod
    def from_json(cls, obj: dict) -> "SegmentRecord":
        hyps = [Hypothesis(h["system_id"], list(h["tokens"]), [float(c) for c in h["confidences"]])
                for h in obj.get("hypotheses", [])]
        tags = obj.get("tags", {})
        return cls(
            id=str(obj["id"]),
            audio_path=obj.get("audio_path", ""),
            duration_s=float(obj["duration_s"]),
            hypotheses=hyps,
            quality=Quality(**obj.get("quality", {})),
            style=tags.get("style", ""),
            gender=tags.get("gender", ""),
            language=tags.get("language", ""),
            transcript=obj.get("transcript"),
        )

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "audio_path": self.audio_path,
            "duration_s": self.duration_s,
            "hypotheses": [asdict(h) for h in self.hypotheses],
            "quality": asdict(self.quality),
            "tags": {"style": self.style, "gender": self.gender, "language": self.language},
        }
        if self.transcript is not None:
            out["transcript"] = self.transcript
        return out

    @property
    def bucket(self) -> tuple[str, str, str]:
        return (self.style, self.gender, self.language)


# --- hypothesis alignment and fusion ---------------------------------------


@dataclass
class Alignment:
    pivot: Hypothesis
    # per system, per pivot position: (token or None, confidence)
    columns: list[list[tuple[str | None, float]]]
    ops: list[list[str]]


def edit_ops(ref: Sequence[str], hyp: Sequence[str]) -> list[tuple[str, int | None, int | None]]:
    """Minimal edit script turning ``ref`` into ``hyp``.

    Ties in the backtrace prefer match, then substitution, deletion and
    insertion, which pushes gaps toward the left.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(diag, d[i - 1, j] + 1, d[i, j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i, j] == d[i - 1, j - 1]:
            ops.append((MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + 1:
            ops.append((SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append((DEL, i - 1, None))
            i -= 1
        else:
            ops.append((INS, None, j - 1))
            j -= 1
    return ops[::-1]


def align_hypotheses(hyps: Sequence[Hypothesis]) -> Alignment:
    """Align every hypothesis to the one with the highest mean confidence."""
    if not hyps:
        raise ValueError("need at least one hypothesis")
    for h in hyps:
        if not h.tokens:
            raise ValueError(f"{h.system_id}: empty token list")
    pivot_idx = max(range(len(hyps)), key=lambda k: (hyps[k].mean_confidence, -k))
    pivot = hyps[pivot_idx]
    columns, all_ops = [], []
    for h in hyps:
        col: list[tuple[str | None, float]] = [(None, 0.0)] * len(pivot.tokens)
        ops = edit_ops(pivot.tokens, h.tokens)
        for op, i, j in ops:
            if op in (MATCH, SUB):
                col[i] = (h.tokens[j], h.confidences[j])
        columns.append(col)
        all_ops.append([op for op, _, _ in ops])
    return Alignment(pivot, columns, all_ops)


@dataclass
class FusedTranscript:
    tokens: list[str]
    confidences: list[float]
    kept: bool

    @property
    def mean_confidence(self) -> float:
        return float(np.mean(self.confidences)) if self.confidences else 0.0


def fuse(alignment: Alignment, threshold: float = 0.8) -> FusedTranscript:
    """Token confidence = mean over systems of (aligned confidence if the
    system agrees with the pivot token, else 0)."""
    pivot = alignment.pivot.tokens
    n_sys = len(alignment.columns)
    confs = []
    for i, tok in enumerate(pivot):
        total = 0.0
        for col in alignment.columns:
            other, c = col[i]
            if other == tok:
                total += c
        confs.append(total / n_sys)
    mean = float(np.mean(confs)) if confs else 0.0
    return FusedTranscript(list(pivot), confs, kept=mean >= threshold)


# --- quality gates ------------------------------------------------------------


@dataclass
class QualityThresholds:
    mos: float = 3.0
    energy: float = 0.1
    pitch_stability: float = 0.5
    noise_ratio: float = 0.3

    def __post_init__(self):
        if not all(math.isfinite(v) for v in asdict(self).values()):
            raise ValueError("quality thresholds must be finite")


def quality_filter(rec: SegmentRecord, th: QualityThresholds) -> tuple[bool, str | None]:
    """Gates run in order; the reason names the first failed one."""
    q = rec.quality
    values = (q.mos_like, q.energy, q.pitch_stability, q.noise_ratio)
    if any(v is None or (isinstance(v, float) and math.isnan(v)) for v in values):
        return False, "missing_metric"
    if q.mos_like < th.mos:
        return False, "mos_like"
    if q.energy < th.energy:
        return False, "energy"
    if q.pitch_stability < th.pitch_stability:
        return False, "pitch_stability"
    if q.noise_ratio > th.noise_ratio:
        return False, "noise_ratio"
    return True, None


# --- dedup and balancing ------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)


def normalize_transcript(text: str) -> str:
    text = unicodedata.normalize("NFKC", text).lower()
    return " ".join(_PUNCT.sub(" ", text).split())


def dedup_key(rec: SegmentRecord, bucket_s: float = 0.5) -> tuple[str, int]:
    text = rec.transcript if rec.transcript is not None else " ".join(rec.hypotheses[0].tokens)
    return normalize_transcript(text), int(math.floor(rec.duration_s / bucket_s))


def deduplicate(records: Sequence[SegmentRecord], bucket_s: float = 0.5) -> list[SegmentRecord]:
    seen = set()
    out = []
    for rec in records:
        key = dedup_key(rec, bucket_s)
        if key not in seen:
            seen.add(key)
            out.append(rec)
    return out


def _draw_key(seed: int, rec_id: str) -> bytes:
    return hashlib.sha256(f"{seed}:{rec_id}".encode("utf-8")).digest()


def balance(records: Sequence[SegmentRecord], cap: float = 3.0, seed: int = 0) -> list[SegmentRecord]:
    """Downsample every (style, gender, language) bucket to at most
    ``cap`` times the smallest bucket.

    Survivors are the records with the smallest seeded hash of their id, so
    the kept set does not depend on input order. Output keeps input order.
    """
    if not records:
        return []
    groups: dict[tuple, list[SegmentRecord]] = defaultdict(list)
    for rec in records:
        groups[rec.bucket].append(rec)
    smallest = min(len(g) for g in groups.values())
    limit = max(1, int(math.floor(cap * smallest)))
    keep_ids = set()
    for g in groups.values():
        chosen = sorted(g, key=lambda r: _draw_key(seed, r.id))[:limit]
        keep_ids.update(id(r) for r in chosen)
    return [r for r in records if id(r) in keep_ids]


def dedup_and_balance(records: Sequence[SegmentRecord], cap: float = 3.0, seed: int = 0,
                      bucket_s: float = 0.5) -> list[SegmentRecord]:
    return balance(deduplicate(records, bucket_s), cap, seed)


# --- pipeline -------------------------------------------------------------------


@dataclass
class PipelineConfig:
    conf_threshold: float = 0.8
    thresholds: QualityThresholds = field(default_factory=QualityThresholds)
    cap: float = 3.0
    duration_bucket_s: float = 0.5
    seed: int = 0


def separate_vocals(rec: SegmentRecord) -> SegmentRecord:
    return rec


def refine_transcript(rec: SegmentRecord) -> SegmentRecord:
    return rec


@dataclass
class PipelineResult:
    records: list[SegmentRecord]
    report: dict


def run_pipeline(
    records: Iterable[SegmentRecord],
    cfg: PipelineConfig | None = None,
    separator: Callable[[SegmentRecord], SegmentRecord] = separate_vocals,
    refiner: Callable[[SegmentRecord], SegmentRecord] = refine_transcript,
) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    records = list(records)
    drops: Counter = Counter()
    counts = {"input": len(records)}

    stage = [separator(r) for r in records]
    counts["separated"] = len(stage)

    fused = []
    for rec in stage:
        if rec.transcript is None:
            ft = fuse(align_hypotheses(rec.hypotheses), cfg.conf_threshold)
            if not ft.kept:
                drops["low_confidence"] += 1
                continue
            rec = replace(rec, transcript=" ".join(ft.tokens))
        fused.append(rec)
    counts["fused"] = len(fused)

    refined = [refiner(r) for r in fused]
    counts["refined"] = len(refined)

    passed = []
    for rec in refined:
        ok, reason = quality_filter(rec, cfg.thresholds)
        if ok:
            passed.append(rec)
        else:
            drops[reason] += 1
    counts["quality"] = len(passed)

    unique = deduplicate(passed, cfg.duration_bucket_s)
    drops["duplicate"] += len(passed) - len(unique)
    counts["dedup"] = len(unique)

    balanced = balance(unique, cfg.cap, cfg.seed)
    drops["balance"] += len(unique) - len(balanced)
    counts["balanced"] = len(balanced)

    report = {"counts": counts, "drop_reasons": dict(sorted((k, v) for k, v in drops.items() if v))}
    return PipelineResult(balanced, report)


def read_manifest(path: str | Path) -> list[SegmentRecord]:
    with open(path, encoding="utf-8") as fh:
        return [SegmentRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def write_manifest(path: str | Path, records: Iterable[SegmentRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def synthetic_manifest(n: int, seed: int = 0, dup_rate: float = 0.1) -> list[SegmentRecord]:
    """Random records with 2-3 ASR hypotheses, varied quality and tags."""
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(40)]
    styles, genders, langs = ["pop", "opera", "folk", "jazz"], ["f", "m"], ["en", "zh"]
    recs: list[SegmentRecord] = []
    for i in range(n):
        if recs and rng.random() < dup_rate:
            src = recs[int(rng.integers(len(recs)))]
            truth = normalize_transcript(src.transcript or " ".join(src.hypotheses[0].tokens)).split()
            dur = src.duration_s
        else:
            truth = list(rng.choice(words, size=int(rng.integers(3, 9))))
            dur = round(float(rng.uniform(1.0, 20.0)), 2)
        hyps = []
        for s in range(int(rng.integers(2, 4))):
            toks = list(truth)
            if rng.random() < 0.3:
                toks[int(rng.integers(len(toks)))] = str(rng.choice(words))
            conf = np.clip(rng.uniform(0.7, 1.0, size=len(toks)), 0, 1).round(3).tolist()
            hyps.append(Hypothesis(f"asr{s}", [str(t) for t in toks], conf))
        missing = rng.random() < 0.02
        q = Quality(
            mos_like=None if missing else round(float(rng.uniform(2.5, 4.5)), 3),
            energy=round(float(rng.uniform(0.0, 1.0)), 3),
            pitch_stability=round(float(rng.uniform(0.35, 1.0)), 3),
            noise_ratio=round(float(rng.uniform(0.0, 0.45)), 3),
        )
        recs.append(SegmentRecord(
            id=f"seg{i:05d}", audio_path=f"audio/seg{i:05d}.wav", duration_s=dur, hypotheses=hyps, quality=q,
            style=str(rng.choice(styles)), gender=str(rng.choice(genders)), language=str(rng.choice(langs)),
        ))
    return recs
