"""Command-line entry point: ``tavq <verb> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration/checkpoint error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint, harness, synth
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, parse_key_values
from .model import NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("tavq")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or key=value config file")
    common.add_argument("--seed", type=int, help="override the seed (data_seed for gen-data)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tavq", description="Text-aligned hierarchical VQ on synthetic data.",
                                epilog="exit codes: 0 ok, 2 config or checkpoint error, 3 numerical abort")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic image/caption dataset")
    t = sub.add_parser("train", parents=[common], help="train and write metrics.jsonl + checkpoints")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out data")
    e.add_argument("--checkpoint", required=True)
    sub.add_parser("ablate", parents=[common], help="loss-term (and factor) ablation table")
    sub.add_parser("time-sampling", parents=[common], help="sampled vs full-set step time")
    return p


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.set:
        cfg = RunConfig.from_dict(parse_key_values("\n".join(args.set)), base=cfg)
    if args.seed is not None:
        cfg = replace(cfg, **({"data_seed": args.seed} if args.verb == "gen-data" else {"seed": args.seed}))
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.verb == "gen-data":
        # batch size is irrelevant when only writing data
        cfg = replace(cfg, batch=min(cfg.batch, cfg.data_count))
    return cfg.validate()


def _emit(obj: dict, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_gen_data(cfg: RunConfig) -> Path:
    out = Path(cfg.data_dir or cfg.out_dir)
    spec = harness.dataset_spec(cfg)
    synth.export(synth.generate(spec), out)
    meta = {"count": spec.count, "image_size": spec.image_size, "seed": spec.seed,
            "vocabulary": spec.vocabulary}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def cmd_train(cfg: RunConfig, resume: str | None = None) -> Path:
    result = harness.train(cfg, cfg.out_dir, resume=resume)
    if result.records:
        last = harness.strip_wall_clock(result.records[-1])
        print(json.dumps(last, sort_keys=True))
    return result.out_dir


def cmd_eval(cfg: RunConfig, ckpt: str) -> dict:
    state = checkpoint.load(ckpt, cfg)
    report = harness.evaluate(cfg, state)
    _emit(report, Path(cfg.out_dir) / "eval.json")
    return report


def cmd_ablate(cfg: RunConfig) -> Path:
    path = harness.ablate(cfg, cfg.out_dir)
    print(path.read_text(encoding="utf-8"), end="")
    return path


def cmd_time_sampling(cfg: RunConfig) -> dict:
    report = harness.time_sampling(cfg)
    summary = {k: report[k] for k in ("steps", "q", "min_units", "sampled_ms", "full_ms", "ratio")}
    out = Path(cfg.out_dir) / "timing.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit(summary)
    return report


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.verb == "gen-data":
            print(cmd_gen_data(cfg))
        elif args.verb == "train":
            cmd_train(cfg, args.resume)
        elif args.verb == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.verb == "ablate":
            cmd_ablate(cfg)
        elif args.verb == "time-sampling":
            cmd_time_sampling(cfg)
    except (ConfigError, CheckpointError) as exc:
        print(f"tavq {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"tavq {args.verb}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
