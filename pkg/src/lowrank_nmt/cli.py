"""Command-line entry point: ``lowrank-nmt <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .data import synthetic_task, write_parallel
from .models import ConfigurationError


def _experiment_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    overrides = {
        "seed": args.seed, "preset": args.preset, "scheme": args.scheme, "inner_size": args.inner_size,
        "out": args.out, "steps": args.steps, "batch_size": args.batch_size, "accumulation": args.accumulation,
        "train_src": args.train_src, "train_tgt": args.train_tgt,
        "valid_src": args.valid_src, "valid_tgt": args.valid_tgt, "beam_width": args.beam,
    }
    return dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    cfg.validate()
    res = harness.run_train(cfg)
    print(json.dumps(res.summary, indent=2))
    return 0


def cmd_compare(args) -> int:
    cfg = _experiment_config(args)
    cfg.validate()
    rows = harness.run_comparison(cfg, args.inner_size)
    print(harness.format_table(rows))
    return 0


def cmd_compress(args) -> int:
    report = harness.run_compress(args.checkpoint, args.method, args.out, rank=args.rank,
                                  groups=args.groups, fraction=args.prune_fraction)
    print(json.dumps(report, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    score = harness.run_evaluate(args.checkpoint, args.src, args.out, args.ref, args.beam, args.max_len)
    if score is not None:
        print(f"BLEU {score:.2f}")
    return 0


def cmd_report(args) -> int:
    rows = harness.run_report(args.runs, args.out)
    print(harness.format_table(rows))
    return 0


def cmd_spectrum(args) -> int:
    text = harness.run_spectrum(args.checkpoint, args.out)
    sys.stdout.write(text)
    return 0


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, count, offset in (("train", args.count, 0), ("valid", args.valid_count, 1)):
        pairs = synthetic_task(args.kind, args.vocab_size, (args.min_len, args.max_len), count, args.seed + offset)
        write_parallel(pairs, out / f"{split}.src", out / f"{split}.tgt")
    print(f"wrote {args.count}+{args.valid_count} {args.kind} pairs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lowrank-nmt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def train_flags(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset")
        sp.add_argument("--scheme", choices=["none", "embed", "ff", "attention"])
        sp.add_argument("--inner-size", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--accumulation", type=int)
        sp.add_argument("--beam", type=int)
        sp.add_argument("--train-src")
        sp.add_argument("--train-tgt")
        sp.add_argument("--valid-src")
        sp.add_argument("--valid-tgt")
        sp.add_argument("--out")

    sp = sub.add_parser("train", help="train one model")
    train_flags(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("compare", help="baseline vs in-training factorized vs equal-size pruned")
    train_flags(sp)
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("compress", help="post-training pruning and/or SVD factorization")
    sp.add_argument("checkpoint")
    sp.add_argument("--method", required=True, choices=["prune", "svd", "svd_then_prune"])
    sp.add_argument("--rank", type=int)
    sp.add_argument("--groups", default="attention", choices=["embed", "ff", "attention"])
    sp.add_argument("--prune-fraction", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_compress)

    sp = sub.add_parser("evaluate", help="decode a source file and optionally score it")
    sp.add_argument("checkpoint")
    sp.add_argument("--src", required=True)
    sp.add_argument("--ref")
    sp.add_argument("--beam", type=int, default=1)
    sp.add_argument("--max-len", type=int, default=50)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("report", help="comparison table and time/perplexity curves")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("spectrum", help="singular spectra of every weight matrix")
    sp.add_argument("checkpoint")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_spectrum)

    sp = sub.add_parser("synth-data", help="write a synthetic copy/reverse corpus")
    sp.add_argument("--kind", default="reverse", choices=["copy", "reverse"])
    sp.add_argument("--vocab-size", type=int, default=50)
    sp.add_argument("--min-len", type=int, default=1)
    sp.add_argument("--max-len", type=int, default=10)
    sp.add_argument("--count", type=int, default=5000)
    sp.add_argument("--valid-count", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
