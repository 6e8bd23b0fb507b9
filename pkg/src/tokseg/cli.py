"""Command-line entry point: ``tokseg {gen,train,eval,ablate,check,dump-mask}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checks
from .data import directory_digest, generate_dataset, read_dataset, write_dataset
from .errors import CheckpointVersion, ConfigParse, DatasetMissing, TokSegError
from .metrics import write_metrics_csv
from .train import (AXES, RunConfig, ablate, dump_masks, evaluate, grid_csv, load_model,
                    load_splits, metrics_row, parse_config, run)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> RunConfig:
    path = getattr(args, "config", None)
    if path and not Path(path).is_file():
        raise ConfigParse(f"config file {path} not found")
    text = Path(path).read_text() if path else ""
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigParse(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return parse_config(text, overrides)


def cmd_gen(args) -> int:
    if args.n == 0:
        print("warning: --n 0 writes an empty dataset", file=sys.stderr)
    samples = generate_dataset(args.seed, args.n, size=args.size, max_objects=args.max_objects)
    out = write_dataset(samples, args.out, seed=args.seed, image_size=args.size)
    print(f"wrote {len(samples)} samples to {out}")
    print(f"sha256 {directory_digest(out)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.output.dir)
    outcome = run(cfg, out_dir=out)
    r = outcome.result
    print(f"trained {cfg.train.steps} steps; final loss {outcome.history[-1].total:.4f}"
          if outcome.history else "trained 0 steps")
    print(f"test ciou={r.ciou:.6f} giou={r.giou:.6f} n={r.n_samples}")
    print(f"artifacts in {out}")
    return EXIT_OK


def _eval_samples(cfg: RunConfig, dataset: str | None):
    if dataset:
        if not Path(dataset, "index.tsv").exists():
            raise DatasetMissing(f"no dataset at {dataset}")
        return read_dataset(dataset), "custom"
    return load_splits(cfg)[1], "test"


def cmd_eval(args) -> int:
    cfg = _config(args)
    if not Path(args.checkpoint).exists():
        raise CheckpointVersion(f"checkpoint {args.checkpoint} not found")
    model = load_model(cfg, args.checkpoint)
    samples, split = _eval_samples(cfg, args.dataset)
    result = evaluate(model, samples, cfg)
    row = metrics_row(cfg, result, split)
    if args.out:
        write_metrics_csv(args.out, [row], append=args.append)
    print(",".join(row))
    if args.dump_masks:
        n = dump_masks(result, args.dump_masks)
        print(f"dumped {n} mask pairs to {args.dump_masks}")
    return EXIT_OK


def cmd_dump_mask(args) -> int:
    cfg = _config(args)
    if not Path(args.checkpoint).exists():
        raise CheckpointVersion(f"checkpoint {args.checkpoint} not found")
    model = load_model(cfg, args.checkpoint)
    samples, _ = _eval_samples(cfg, args.dataset)
    seg = [s for s in samples if s.is_segmentation]
    picked = seg if args.index is None else [seg[args.index]]
    result = evaluate(model, picked, cfg)
    n = dump_masks(result, args.out)
    print(f"dumped {n} mask pairs to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    stats = ablate(cfg, args.axis, list(range(args.seeds)), workers=args.workers)
    text = grid_csv(args.axis, stats)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_check(args) -> int:
    results, elapsed = checks.run_checks(corrupt_shuffle_table=args.corrupt_shuffle_table)
    print(checks.report(results, elapsed))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tokseg", description="decoder-free segmentation toy pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key=value config file (defaults when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.steps=200")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--max-objects", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train one configuration and evaluate it")
    with_config(t)
    t.add_argument("--out", help="output directory (default: output.dir from the config)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="dataset directory (default: the config's test split)")
    e.add_argument("--out", help="metrics CSV to write")
    e.add_argument("--append", action="store_true", help="append to an existing metrics CSV")
    e.add_argument("--dump-masks", metavar="DIR", help="write predicted masks as PGM pairs")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train every variant along one axis")
    with_config(a)
    a.add_argument("--axis", choices=AXES, required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--workers", type=int, default=None,
                   help="parallel grid cells (default: $S1E_THREADS or 1)")
    a.add_argument("--out", help="grid CSV to write")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("check", help="run the property suite")
    c.add_argument("--corrupt-shuffle-table", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(fn=cmd_check)

    d = sub.add_parser("dump-mask", help="export predicted masks for inspection")
    with_config(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--dataset")
    d.add_argument("--index", type=int, help="segmentation sample index (default: all)")
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_dump_mask)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigParse as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TokSegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
