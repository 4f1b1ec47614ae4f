"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import checks, corpus, harness
from .ar import ar_generate
from .config import ConfigError, RunConfig, load_config
from .flow import ode_sample, write_frames_csv
from .numerics import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4
GRAD_TOL = 1e-3


def _parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's defaults from erasing flags given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stylevoc", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic AR/flow/preference manifests")
    sub.add_parser("train-ar", parents=[common], help="supervised AR stage")
    sub.add_parser("train-flow", parents=[common], help="supervised flow-decoder stage")
    sub.add_parser("train-dpo", parents=[common], help="preference stage on the AR model")

    g = sub.add_parser("generate", parents=[common], help="decode content-style tokens")
    g.add_argument("--split", default="test", help="AR manifest split to decode")
    g.add_argument("--limit", type=int, default=None)
    g.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    g.add_argument("--temperature", type=float, default=1.0)

    s = sub.add_parser("sample-flow", parents=[common], help="integrate the flow ODE for one token sequence")
    s.add_argument("--tokens", required=True, help="space-separated token ids")
    s.add_argument("--speaker", type=int, required=True)
    s.add_argument("--n-samples", type=int, default=1)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--output", help="CSV path; stdout when omitted")

    c = sub.add_parser("pipeline", parents=[common], help="curate a segment manifest")
    c.add_argument("--input", help="JSON-lines manifest; a synthetic one is generated when omitted")
    c.add_argument("--synthetic", type=int, default=1000, help="size of the generated manifest")
    c.add_argument("--output", help="kept-record manifest path")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of the three losses")
    sub.add_parser("ablate", parents=[common], help="five-variant ablation ladder")
    sub.add_parser("eval", parents=[common], help="evaluate the checkpoints under --out-dir")
    return p


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    args = _parser().parse_args(argv)
    # set_defaults would leak into the shared subparser actions, so fill in afterwards
    for key, value in (("config", None), ("seed", None), ("out_dir", None), ("set", []), ("verbose", False)):
        if not hasattr(args, key):
            setattr(args, key, value)
    return args


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError([f"--set {item!r}: expected KEY=VALUE"])
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out_dir is not None:
        overrides["out_dir"] = repr(args.out_dir)
    if args.config is not None and not Path(args.config).is_file():
        raise ConfigError([f"config file {args.config} does not exist"])
    return load_config(args.config, overrides)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _generate(cfg: RunConfig, args) -> None:
    out = Path(cfg.out_dir)
    model = harness.load_ar(cfg, harness.latest_ar_checkpoint(out))
    store = harness.ensure_data(cfg, out)
    data = store.ar(args.split)
    n = len(data["content"]) if args.limit is None else min(args.limit, len(data["content"]))
    gen = torch.Generator().manual_seed(cfg.seed)
    model.eval()
    with torch.no_grad():
        gens = ar_generate(model, data["content"][:n], data["ref"][:n], mode=args.mode,
                           temperature=args.temperature, generator=gen)
    for g in gens:
        print(" ".join(str(t) for t in g.tokens))


def _sample_flow(cfg: RunConfig, args) -> None:
    path = Path(cfg.out_dir) / "ckpt" / "sft_flow.s2vc"
    if not path.exists():
        raise harness.DependencyError(f"{path} missing; run train-flow first")
    model = harness.load_flow(cfg, path)
    tokens = [int(t) for t in args.tokens.split()]
    tok = torch.tensor([tokens] * args.n_samples)
    spk = model.speaker_embed([args.speaker] * args.n_samples)
    gen = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        x = ode_sample(model.field, tok, spk, args.steps or cfg.train.ode_steps, model.cfg.feat_dim, gen)
    frames = x.reshape(-1, model.cfg.feat_dim).numpy()
    write_frames_csv(args.output or sys.stdout, frames)


def _pipeline(cfg: RunConfig, args) -> None:
    if args.input:
        records = corpus.read_manifest(args.input)
    else:
        records = corpus.synthetic_manifest(args.synthetic, seed=cfg.seed)
    result = corpus.run_pipeline(records, cfg.pipeline)
    if args.output:
        corpus.write_manifest(args.output, result.records)
    _print_json(result.report)


def _gradcheck(cfg: RunConfig) -> None:
    report = checks.run_all(cfg.seed)
    _print_json(report)
    bad = [k for k, v in report.items() if not v["max_rel_err"] < GRAD_TOL]
    if bad:
        raise NumericError(f"gradient check above {GRAD_TOL}: {', '.join(bad)}")


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        torch.set_num_threads(1)
        cmd = args.command
        if cmd == "gen-data":
            print(harness.gen_synthetic(cfg))
        elif cmd in ("train-ar", "train-flow", "train-dpo"):
            stage = {"train-ar": "sft_ar", "train-flow": "sft_flow", "train-dpo": "dpo"}[cmd]
            _print_json(harness.strip_timing(harness.run_stage(stage, cfg)))
        elif cmd == "generate":
            _generate(cfg, args)
        elif cmd == "sample-flow":
            _sample_flow(cfg, args)
        elif cmd == "pipeline":
            _pipeline(cfg, args)
        elif cmd == "gradcheck":
            _gradcheck(cfg)
        elif cmd == "ablate":
            table = harness.run_ablation(cfg)
            print(harness.ablation_markdown(table), end="")
        elif cmd == "eval":
            _print_json(harness.evaluate_run(cfg))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (harness.DependencyError, FileNotFoundError) as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
