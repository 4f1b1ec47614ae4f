"""Synthetic data files, the SFT -> preference training stages and the
ablation ladder."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .ar import ArModel, adam, make_batch, sft_step_ar
from .config import RunConfig
from .flow import FlowDecoder, make_flow_batch, sft_step_flow
from .numerics import Rng, load_checkpoint, load_into, save_checkpoint
from .preference import (DEGRADATIONS, DegradationError, DegradationSpec, PreferencePair, dpo_step,
                         make_negatives, mean_margin)
from .synthetic import SyntheticTask

log = logging.getLogger(__name__)

STAGES = ("sft_ar", "sft_flow", "dpo")

# substream indices of the run seed
DATA, AR_INIT, AR_BATCH, FLOW_INIT, FLOW_BATCH, DPO, EVAL = range(7)


class DependencyError(RuntimeError):
    pass


def streams(seed: int) -> list[Rng]:
    return Rng(seed).split(7)


def _seed_of(rng: Rng) -> int:
    return int(rng.np.integers(2**62))


# --- data files ------------------------------------------------------------------


def _dump_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def gen_synthetic(cfg: RunConfig, out_dir: str | Path | None = None) -> Path:
    """Write AR, flow and preference manifests for train/val/test under ``<out>/data``."""
    cfg.validate()
    data_dir = Path(out_dir or cfg.out_dir) / "data"
    (data_dir / "style_refs").mkdir(parents=True, exist_ok=True)
    task = SyntheticTask(cfg.task)
    rng = streams(cfg.seed)[DATA].np
    sizes = {"train": cfg.train.n_train, "val": cfg.train.n_val, "test": cfg.train.n_test}

    ar = {}
    for split, n in sizes.items():
        d = task.ar_examples(n, rng)
        ar[split] = d
        np.save(data_dir / "style_refs" / f"{split}.npy", d["ref"])
        _dump_jsonl(data_dir / f"ar_{split}.jsonl", (
            {"id": i, "content": d["content"][i], "style": d["style"][i], "accents": d["accents"][i],
             "style_ref_path": f"style_refs/{split}.npy#{i}", "target": d["target"][i]}
            for i in range(n)))
    for split, n in sizes.items():
        d = task.flow_examples(n, rng)
        _dump_jsonl(data_dir / f"flow_{split}.jsonl", (
            {"id": i, "tokens": d["tokens"][i], "style": d["style"][i], "speaker": d["speaker"][i],
             "frames": [[float(v) for v in row] for row in d["frames"][i]]}
            for i in range(n)))
    for split, n in (("train", cfg.train.dpo_pairs), ("test", cfg.train.n_test)):
        src = ar[split]
        rows = []
        for i in range(n):
            j = i % len(src["content"])
            kind = DEGRADATIONS[i % len(DEGRADATIONS)]
            try:
                neg = make_negatives(src["target"][j], DegradationSpec(kind, 0.5), rng,
                                     cfg.task.style_vocab, cfg.task.terminator)
            except DegradationError:
                continue
            rows.append({"input_tokens": src["content"][j], "style_ref_path": f"style_refs/{split}.npy#{j}",
                         "pos_tokens": src["target"][j], "neg_tokens": neg, "degradation_kind": kind})
        _dump_jsonl(data_dir / f"pref_{split}.jsonl", rows)
    return data_dir


class DataStore:
    """Lazy reader for the files written by :func:`gen_synthetic`."""

    def __init__(self, data_dir: Path):
        self.dir = Path(data_dir)
        self._refs: dict[str, np.ndarray] = {}

    def ref(self, path: str) -> np.ndarray:
        file, _, idx = path.partition("#")
        if file not in self._refs:
            self._refs[file] = np.load(self.dir / file)
        arr = self._refs[file]
        return arr if idx == "" else arr[int(idx)]

    def ar(self, split: str) -> dict:
        rows = _read_jsonl(self.dir / f"ar_{split}.jsonl")
        return {
            "content": [r["content"] for r in rows],
            "style": [r["style"] for r in rows],
            "accents": [r["accents"] for r in rows],
            "ref": np.stack([self.ref(r["style_ref_path"]) for r in rows]),
            "target": [r["target"] for r in rows],
        }

    def flow(self, split: str) -> dict:
        rows = _read_jsonl(self.dir / f"flow_{split}.jsonl")
        return {
            "tokens": [r["tokens"] for r in rows],
            "speaker": [r["speaker"] for r in rows],
            "frames": [np.asarray(r["frames"], dtype=np.float32) for r in rows],
        }

    def pairs(self, split: str) -> list[PreferencePair]:
        return [PreferencePair(r["input_tokens"], self.ref(r["style_ref_path"]), r["pos_tokens"],
                               r["neg_tokens"], r["degradation_kind"])
                for r in _read_jsonl(self.dir / f"pref_{split}.jsonl")]


def ensure_data(cfg: RunConfig, out_dir: Path) -> DataStore:
    data_dir = out_dir / "data"
    if not (data_dir / "pref_test.jsonl").exists():
        gen_synthetic(cfg, out_dir)
    return DataStore(data_dir)


# --- training -------------------------------------------------------------------------


def lr_at(step: int, total: int, base: float, warmup: int, schedule: str, min_frac: float) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if schedule == "constant":
        return base
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return base * (min_frac + (1 - min_frac) * 0.5 * (1 + math.cos(math.pi * progress)))


def _curve(losses: list[float], every: int = 100) -> list[float]:
    return [float(np.mean(losses[i : i + every])) for i in range(0, len(losses), every)]


def build_ar(cfg: RunConfig) -> ArModel:
    torch.manual_seed(_seed_of(streams(cfg.seed)[AR_INIT]))
    return ArModel(cfg.ar_config())


def build_flow(cfg: RunConfig) -> FlowDecoder:
    torch.manual_seed(_seed_of(streams(cfg.seed)[FLOW_INIT]))
    return FlowDecoder(cfg.flow_config())


def train_ar(cfg: RunConfig, data: dict) -> tuple[ArModel, list[float]]:
    tr = cfg.train
    model = build_ar(cfg)
    opt = adam(model.parameters(), tr.ar_lr)
    rng = streams(cfg.seed)[AR_BATCH].np
    n = len(data["content"])
    losses = []
    for step in range(tr.ar_steps):
        idx = rng.integers(0, n, tr.ar_batch)
        batch = make_batch(model.cfg, [data["content"][i] for i in idx], None, data["ref"][idx],
                           targets=[data["target"][i] for i in idx])
        lr = lr_at(step, tr.ar_steps, tr.ar_lr, tr.ar_warmup, tr.schedule, tr.min_lr_frac)
        losses.append(sft_step_ar(model, opt, batch, lr=lr, batch_ids=idx.tolist()))
    return model, losses


def train_flow(cfg: RunConfig, data: dict) -> tuple[FlowDecoder, list[float]]:
    tr = cfg.train
    model = build_flow(cfg)
    opt = adam(model.parameters(), tr.flow_lr)
    s = streams(cfg.seed)[FLOW_BATCH]
    rng, gen = s.np, s.torch
    n = len(data["tokens"])
    losses = []
    for step in range(tr.flow_steps):
        idx = rng.integers(0, n, tr.flow_batch)
        batch = make_flow_batch([data["tokens"][i] for i in idx], [data["frames"][i] for i in idx],
                                [data["speaker"][i] for i in idx], model.cfg.feat_dim)
        lr = lr_at(step, tr.flow_steps, tr.flow_lr, tr.flow_warmup, tr.schedule, tr.min_lr_frac)
        losses.append(sft_step_flow(model, opt, batch, gen, lr=lr))
    return model, losses


def model_negatives(cfg: RunConfig, model: ArModel, data: dict, n: int, seed: int) -> list[PreferencePair]:
    """Sampled generations that differ from the reference output become negatives."""
    sub = {k: v[:n] for k, v in data.items()}
    gen = torch.Generator().manual_seed(seed)
    gens = metrics.generate(model, sub, mode="sample", temperature=cfg.train.sample_temperature, generator=gen)
    pairs = []
    for i, g in enumerate(gens):
        if g.tokens != list(sub["target"][i]) and g.tokens:
            pairs.append(PreferencePair(sub["content"][i], sub["ref"][i], sub["target"][i], g.tokens, "model"))
    return pairs


def train_dpo(cfg: RunConfig, model: ArModel, pairs: list[PreferencePair]) -> list[float]:
    tr = cfg.train
    opt = adam(model.parameters(), tr.dpo_lr)
    rng = streams(cfg.seed)[DPO].np
    beta = tr.dpo_beta or None
    ref = copy.deepcopy(model).requires_grad_(False) if beta else None
    losses = []
    for step in range(tr.dpo_steps):
        idx = rng.integers(0, len(pairs), min(tr.dpo_batch, len(pairs)))
        losses.append(dpo_step(model, opt, [pairs[i] for i in idx], lr=tr.dpo_lr,
                               length_norm=tr.dpo_length_norm, beta=beta, ref_model=ref))
    return losses


# --- evaluation -----------------------------------------------------------------------


def evaluate_ar(cfg: RunConfig, model: ArModel, store: DataStore, zero_style: bool = True) -> dict:
    task = SyntheticTask(cfg.task)
    val, test = store.ar("val"), store.ar("test")
    greedy = metrics.generate(model, test)
    out = {
        "exact_match": metrics.exact_match(greedy, test["target"]),
        "style_probe_acc": metrics.style_probe_accuracy(task, val, test, greedy),
        "encoder_probe_acc": metrics.encoder_probe_accuracy(model, val, test),
        "greedy_truncated": float(np.mean([g.truncated for g in greedy])),
    }
    if zero_style:
        out["exact_match_zero_style"] = metrics.exact_match(metrics.generate(model, test, zero_style=True),
                                                            test["target"])
    n = cfg.train.failure_samples
    reps = -(-n // len(test["content"]))
    tiled = {k: (list(v) * reps)[:n] if isinstance(v, list) else np.concatenate([v] * reps)[:n]
             for k, v in test.items()}
    gen = torch.Generator().manual_seed(_seed_of(streams(cfg.seed)[EVAL]))
    sampled = metrics.generate(model, tiled, mode="sample", temperature=cfg.train.sample_temperature, generator=gen)
    out["failure_rates"] = metrics.failure_rates(sampled, tiled["target"], cfg.task.terminator)
    return out


def evaluate_flow(cfg: RunConfig, model: FlowDecoder, store: DataStore, n_seqs: int = 8) -> dict:
    task = SyntheticTask(cfg.task)
    test = store.flow("test")
    seqs = test["tokens"][:n_seqs]
    return metrics.flow_metrics(model, task, seqs, cfg.train.flow_samples, cfg.train.ode_steps,
                                _seed_of(streams(cfg.seed)[EVAL]))


# --- stages ---------------------------------------------------------------------------------


def _paths(out_dir: Path) -> tuple[Path, Path]:
    ck, rep = out_dir / "ckpt", out_dir / "reports"
    ck.mkdir(parents=True, exist_ok=True)
    rep.mkdir(parents=True, exist_ok=True)
    return ck, rep


def _write_report(path: Path, report: dict) -> None:
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_ar(cfg: RunConfig, path: Path) -> ArModel:
    model = build_ar(cfg)
    entries = load_checkpoint(path)
    load_into(model, {k: v for k, v in entries.items() if not k.startswith(("flow.", "spk."))})
    return model


def load_flow(cfg: RunConfig, path: Path) -> FlowDecoder:
    model = build_flow(cfg)
    entries = load_checkpoint(path)
    load_into(model, {k: v for k, v in entries.items() if k.startswith(("flow.", "spk."))})
    return model


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_stage(stage: str, cfg: RunConfig, out_dir: str | Path | None = None) -> dict:
    """Train one stage, write ``ckpt/<stage>.s2vc`` and ``reports/<stage>.json``."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    cfg.validate()
    torch.set_num_threads(1)
    out = Path(out_dir or cfg.out_dir)
    ck, rep = _paths(out)
    t0 = time.perf_counter()

    if stage == "dpo" and not (ck / "sft_ar.s2vc").exists():
        raise DependencyError("dpo stage needs ckpt/sft_ar.s2vc; run sft_ar first")
    store = ensure_data(cfg, out)

    if stage == "sft_ar":
        model, losses = train_ar(cfg, store.ar("train"))
        save_checkpoint(ck / "sft_ar.s2vc", model)
        report = {"stage": stage, "final_loss": losses[-1], "loss_curve": _curve(losses),
                  **evaluate_ar(cfg, model, store)}
    elif stage == "sft_flow":
        model, losses = train_flow(cfg, store.flow("train"))
        save_checkpoint(ck / "sft_flow.s2vc", model)
        report = {"stage": stage, "final_loss": losses[-1], "loss_curve": _curve(losses),
                  **evaluate_flow(cfg, model, store)}
    else:
        report = _dpo_stage(cfg, store, ck)
    report["timing"] = {"wall_s": time.perf_counter() - t0}
    _write_report(rep / f"{stage}.json", report)
    return report


def _dpo_stage(cfg: RunConfig, store: DataStore, ck: Path) -> dict:
    model = load_ar(cfg, ck / "sft_ar.s2vc")
    train = store.ar("train")
    test = store.ar("test")
    pairs = store.pairs("train")
    held_out = store.pairs("test")
    seed = _seed_of(streams(cfg.seed)[DPO])
    if cfg.train.dpo_model_negatives:
        pairs += model_negatives(cfg, model, train, cfg.train.dpo_pairs, seed)
        held_out += model_negatives(cfg, model, test, len(test["content"]), seed + 1)
    before = evaluate_ar(cfg, model, store, zero_style=False)
    margin_before = mean_margin(model, held_out)
    losses = train_dpo(cfg, model, pairs)
    after = evaluate_ar(cfg, model, store, zero_style=False)
    margin_after = mean_margin(model, held_out)

    tensors = dict(model.named_parameters())
    flow_path = ck / "sft_flow.s2vc"
    if flow_path.exists():
        # carry the untouched flow entries so dpo.s2vc is the complete system
        flow_entries = {k: torch.from_numpy(v) for k, v in load_checkpoint(flow_path).items()}
        tensors.update(flow_entries)
    save_checkpoint(ck / "dpo.s2vc", tensors)
    return {
        "stage": "dpo", "n_pairs": len(pairs), "n_held_out_pairs": len(held_out),
        "loss_first": losses[0] if losses else None, "loss_last": losses[-1] if losses else None,
        "margin_before": margin_before, "margin_after": margin_after,
        "before": before, "after": after,
    }


def latest_ar_checkpoint(out: Path) -> Path:
    for name in ("dpo.s2vc", "sft_ar.s2vc"):
        if (out / "ckpt" / name).exists():
            return out / "ckpt" / name
    raise DependencyError("no AR checkpoint; run train-ar first")


def evaluate_run(cfg: RunConfig, out_dir: str | Path | None = None) -> dict:
    torch.set_num_threads(1)
    out = Path(out_dir or cfg.out_dir)
    store = ensure_data(cfg, out)
    report = {}
    try:
        report["ar"] = evaluate_ar(cfg, load_ar(cfg, latest_ar_checkpoint(out)), store)
    except DependencyError:
        pass
    if (out / "ckpt" / "sft_flow.s2vc").exists():
        report["flow"] = evaluate_flow(cfg, load_flow(cfg, out / "ckpt" / "sft_flow.s2vc"), store)
    if not report:
        raise DependencyError("nothing to evaluate: no checkpoints under " + str(out / "ckpt"))
    return report


# --- ablation ------------------------------------------------------------------------------------

VARIANTS = (
    ("SFT only", dict(film_on=False, xattn_on=False, spk_emb_on=False, dpo_on=False)),
    ("+ FiLM", dict(film_on=True, xattn_on=False, spk_emb_on=False, dpo_on=False)),
    ("+ Cross-Attention", dict(film_on=True, xattn_on=True, spk_emb_on=False, dpo_on=False)),
    ("+ Global Spk. Emb.", dict(film_on=True, xattn_on=True, spk_emb_on=True, dpo_on=False)),
    ("+ DPO", dict(film_on=True, xattn_on=True, spk_emb_on=True, dpo_on=True)),
)

ABLATION_METRICS = ("style_probe_acc", "exact_match", "speaker_shift_err", "length_failure", "dpo_margin")


def _variant_cfg(cfg: RunConfig, seed: int, switches: dict) -> RunConfig:
    v = copy.deepcopy(cfg)
    v.seed = seed
    for k, val in switches.items():
        setattr(v, k, val)
    return v


def run_ablation(cfg: RunConfig, out_dir: str | Path | None = None) -> dict:
    """Train and score the five-row ladder for every ablation seed.

    Models are cached on the switches they depend on, so rows that share an
    AR or flow configuration share the trained model.
    """
    cfg.validate()
    torch.set_num_threads(1)
    out = Path(out_dir or cfg.out_dir)
    t0 = time.perf_counter()
    per_seed = {}
    for seed in cfg.ablation_seeds:
        seed_dir = out / f"seed{seed}"
        store = ensure_data(_variant_cfg(cfg, seed, {}), seed_dir)
        ar_cache, flow_cache, dpo_cache = {}, {}, {}
        rows = {}
        for name, sw in VARIANTS:
            vcfg = _variant_cfg(cfg, seed, sw)
            ar_key = (sw["film_on"], sw["xattn_on"])
            if ar_key not in ar_cache:
                log.info("seed %d: training AR film=%s xattn=%s", seed, *ar_key)
                model, _ = train_ar(vcfg, store.ar("train"))
                ar_cache[ar_key] = (model, evaluate_ar(vcfg, model, store, zero_style=False))
            model, ar_eval = ar_cache[ar_key]
            margin = None
            if sw["dpo_on"]:
                if ar_key not in dpo_cache:
                    tuned = copy.deepcopy(model)
                    held_out = store.pairs("test")
                    pairs = store.pairs("train")
                    dseed = _seed_of(streams(seed)[DPO])
                    if vcfg.train.dpo_model_negatives:
                        pairs += model_negatives(vcfg, tuned, store.ar("train"), vcfg.train.dpo_pairs, dseed)
                    train_dpo(vcfg, tuned, pairs)
                    dpo_cache[ar_key] = (evaluate_ar(vcfg, tuned, store, zero_style=False),
                                         mean_margin(tuned, held_out))
                ar_eval, margin = dpo_cache[ar_key]
            elif sw["film_on"] and sw["xattn_on"]:
                margin = mean_margin(model, store.pairs("test"))
            if sw["spk_emb_on"] not in flow_cache:
                log.info("seed %d: training flow spk=%s", seed, sw["spk_emb_on"])
                flow, _ = train_flow(vcfg, store.flow("train"))
                flow_cache[sw["spk_emb_on"]] = evaluate_flow(vcfg, flow, store)
            fl = flow_cache[sw["spk_emb_on"]]
            rows[name] = {
                "style_probe_acc": ar_eval["style_probe_acc"],
                "exact_match": ar_eval["exact_match"],
                "speaker_shift_err": fl["speaker_shift_mean_err"],
                "length_failure": ar_eval["failure_rates"]["length_failure"],
                "dpo_margin": margin,
            }
        per_seed[str(seed)] = rows
    median = {}
    for name, _ in VARIANTS:
        median[name] = {}
        for key in ABLATION_METRICS:
            vals = [per_seed[str(s)][name][key] for s in cfg.ablation_seeds]
            median[name][key] = None if any(v is None for v in vals) else float(np.median(vals))
    table = {"variants": [n for n, _ in VARIANTS], "median": median, "per_seed": per_seed,
             "seeds": list(cfg.ablation_seeds), "timing": {"wall_s": time.perf_counter() - t0}}
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out / "ablation.json", table)
    (out / "ablation.md").write_text(ablation_markdown(table), encoding="utf-8")
    return table


def ablation_markdown(table: dict) -> str:
    head = "| Variant | Style probe acc | Exact match | Speaker-shift err | Length failures | Held-out margin |\n"
    head += "|---|---|---|---|---|---|\n"
    lines = []
    for name in table["variants"]:
        m = table["median"][name]
        margin = "-" if m["dpo_margin"] is None else f"{m['dpo_margin']:.2f}"
        lines.append(f"| {name} | {m['style_probe_acc']:.3f} | {m['exact_match']:.3f} | "
                     f"{m['speaker_shift_err']:.3f} | {m['length_failure']:.3f} | {margin} |")
    return head + "\n".join(lines) + "\n"


def run_all(cfg: RunConfig, out_dir: str | Path | None = None) -> dict:
    """gen-data, sft_ar, sft_flow, then dpo when enabled."""
    out = Path(out_dir or cfg.out_dir)
    gen_synthetic(cfg, out)
    reports = {s: run_stage(s, cfg, out) for s in ("sft_ar", "sft_flow")}
    if cfg.dpo_on:
        reports["dpo"] = run_stage("dpo", cfg, out)
    return reports


def strip_timing(report):
    if isinstance(report, dict):
        return {k: strip_timing(v) for k, v in report.items() if k != "timing"}
    if isinstance(report, list):
        return [strip_timing(v) for v in report]
    return report


def config_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
