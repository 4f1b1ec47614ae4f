"""Run configuration and the flat ``key = value`` config file format.

Keys are dotted paths into :class:`RunConfig` (``ar.layers``,
``train.ar_lr``); ``#`` starts a comment.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .ar import ArConfig
from .corpus import PipelineConfig
from .flow import FlowConfig
from .synthetic import TaskConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class ArDims:
    layers: int = 2
    width: int = 32
    heads: int = 1
    mlp_mult: int = 4
    film_mask: tuple[bool, bool, bool] = (True, True, True)


@dataclass
class FlowDims:
    width: int = 64
    layers: int = 3
    spk_dim: int = 32
    time_dim: int = 16


@dataclass
class TrainConfig:
    n_train: int = 20000
    n_val: int = 400
    n_test: int = 400
    ar_steps: int = 3000
    ar_batch: int = 64
    ar_lr: float = 2e-5
    ar_warmup: int = 100
    flow_steps: int = 5000
    flow_batch: int = 128
    flow_lr: float = 7e-6
    flow_warmup: int = 100
    dpo_steps: int = 100
    dpo_batch: int = 32
    dpo_lr: float = 1e-6
    dpo_pairs: int = 2000
    dpo_model_negatives: bool = True
    dpo_length_norm: bool = False
    # > 0 switches to the reference-ratio loss against the frozen SFT model
    dpo_beta: float = 0.0
    schedule: str = "cosine"
    min_lr_frac: float = 0.05
    ode_steps: int = 32
    flow_samples: int = 256
    failure_samples: int = 500
    sample_temperature: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    film_on: bool = True
    xattn_on: bool = True
    spk_emb_on: bool = True
    dpo_on: bool = True
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    task: TaskConfig = field(default_factory=TaskConfig)
    ar: ArDims = field(default_factory=ArDims)
    flow: FlowDims = field(default_factory=FlowDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def ar_config(self) -> ArConfig:
        t = self.task
        return ArConfig(
            layers=self.ar.layers, width=self.ar.width, heads=self.ar.heads, mlp_mult=self.ar.mlp_mult,
            film_mask=self.ar.film_mask, content_vocab=t.content_vocab, style_vocab=t.style_vocab,
            style_dim=t.style_dim, max_content=t.max_len, max_target=t.max_target,
            film_on=self.film_on, xattn_on=self.xattn_on,
        )

    def flow_config(self) -> FlowConfig:
        t = self.task
        return FlowConfig(
            vocab=t.style_vocab, feat_dim=t.feat_dim, width=self.flow.width, layers=self.flow.layers,
            spk_dim=self.flow.spk_dim, n_speakers=t.n_speakers, time_dim=self.flow.time_dim,
            spk_on=self.spk_emb_on,
        )

    def validate(self) -> None:
        problems = []
        t, tr = self.task, self.train
        if t.min_len < 1 or t.max_len < t.min_len:
            problems.append("task.min_len/task.max_len")
        if t.n_styles < 1:
            problems.append("task.n_styles")
        if t.accent_tokens and t.accent_shift % t.offset_step == 0:
            problems.append("task.accent_shift")
        if self.ar.width % self.ar.heads:
            problems.append("ar.heads")
        if self.ar.width < 2:
            problems.append("ar.width")
        for key in ("ar_lr", "flow_lr", "dpo_lr"):
            if getattr(tr, key) < 0:
                problems.append(f"train.{key}")
        for key in ("n_train", "n_val", "n_test", "ar_batch", "flow_batch", "dpo_batch", "ode_steps"):
            if getattr(tr, key) < 1:
                problems.append(f"train.{key}")
        if tr.schedule not in ("cosine", "constant"):
            problems.append("train.schedule")
        if tr.dpo_beta < 0:
            problems.append("train.dpo_beta")
        if not self.ablation_seeds:
            problems.append("ablation_seeds")
        try:
            from .synthetic import SyntheticTask

            SyntheticTask(t)
        except ValueError:
            problems.append("task.offset_step")
        if problems:
            raise ConfigError(problems)

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in _flatten(self))


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def _coerce(raw: str, current):
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        value = raw
    if isinstance(current, bool):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if isinstance(value, (bool, int)):
            return bool(value)
        raise TypeError
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, (int, bool)):
            value = (value,)
        if not isinstance(value, (tuple, list)):
            raise TypeError
        return tuple(value)
    if isinstance(current, str):
        return str(value)
    return value


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    problems = []
    for key, raw in pairs.items():
        *path, leaf = key.split(".")
        target = cfg
        try:
            for part in path:
                target = getattr(target, part)
            if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
                raise AttributeError
            setattr(target, leaf, _coerce(raw, getattr(target, leaf)))
        except AttributeError:
            problems.append(f"{key}: unknown key")
        except TypeError:
            problems.append(f"{key}: bad value {raw!r}")
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    problems = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {n}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    if problems:
        raise ConfigError(problems)
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        apply_overrides(cfg, parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg
