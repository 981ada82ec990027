"""Command line entry point: ``sessrec {generate,train,eval,predict,ablate}``.

Exit codes: 0 success, 2 bad input (arguments, config, corpus, checkpoint),
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import tomli
from threadpoolctl import threadpool_limits

from ..datagen import (
    CorpusFormatError,
    GenConfig,
    generate_corpus,
    read_corpus,
    read_entries,
    read_items,
    write_corpus,
    write_entries,
)
from ..ndgrad import CheckpointError
from ..schema import SchemaError
from .config import LETTERS, RunConfig, load_run_config
from .train import (
    Checkpoint,
    NumericalError,
    ablate,
    evaluate,
    format_ablation,
    predict,
    train,
    validation_entries,
)

log = logging.getLogger("sessrec")

EXIT_PARSE = 2
EXIT_NUMERIC = 3


def _tta(value: str):
    if value in ("none", "full"):
        return value
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("tta must be none, full or a sample count") from None
    if k < 0:
        raise argparse.ArgumentTypeError("tta sample count must be >= 0")
    return k


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sessrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--single-thread", action="store_true",
                        help="limit BLAS to one thread and disable worker fan-out (bit-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    p.add_argument("--config", help="TOML file of generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", default="F", help=f"config letter ({''.join(LETTERS)}) or TOML file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="write the evaluation report as JSON here")

    p = sub.add_parser("eval", help="score a checkpoint on labeled entries")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--entries", help="labeled entries file (default: the validation split)")
    p.add_argument("--tta", type=_tta, help="none, full or a sample count (default: the run's setting)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("predict", help="write predicted buy vectors")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True, help="corpus directory (uses test.txt) or entries file")
    p.add_argument("--items", help="items file (default: items.csv next to the input)")
    p.add_argument("--out", required=True)
    p.add_argument("--tta", type=_tta)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("ablate", help="train A-G over several seeds and print a results table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--config", help="TOML file with shared run settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--json", help="write per-seed results here")
    return parser


def _load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomli.load(fh)


def cmd_generate(args) -> int:
    values = _load_toml(args.config) if args.config else {}
    for key in ("seed", "n_train", "n_test"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    cfg = GenConfig.from_dict(values)
    corpus, truth = generate_corpus(cfg)
    write_corpus(args.out, corpus)
    write_entries(Path(args.out) / "test_truth.txt", truth)
    print(f"wrote {len(corpus.train)} train / {len(corpus.test)} test entries, "
          f"{corpus.catalog.size} items to {args.out}")
    return 0


def _run_config(args) -> RunConfig:
    run = load_run_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if args.single_thread:
        overrides["workers"] = 1
    return RunConfig(**{**run.to_dict(), **overrides}) if overrides else run


def cmd_train(args) -> int:
    run = _run_config(args)
    corpus = read_corpus(args.corpus)
    ckpt, report = train(run, corpus, progress=lambda m: log.info(m))
    ckpt.save(args.out)
    text = json.dumps(report.to_dict(), indent=2)
    if args.report:
        Path(args.report).write_text(text)
    print(text)
    return 0


def cmd_eval(args) -> int:
    corpus = read_corpus(args.corpus)
    ckpt = Checkpoint.load(args.ckpt, corpus.catalog)
    if args.entries:
        entries = read_entries(args.entries, corpus.catalog)
    else:
        entries = validation_entries(ckpt.run, corpus)
    workers = 1 if args.single_thread else args.workers
    report = evaluate(ckpt, entries, args.tta, workers=workers)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_predict(args) -> int:
    inp = Path(args.inp)
    entries_path = inp / "test.txt" if inp.is_dir() else inp
    items_path = Path(args.items) if args.items else entries_path.parent / "items.csv"
    catalog = read_items(items_path)
    entries = read_entries(entries_path, catalog)
    ckpt = Checkpoint.load(args.ckpt, catalog)
    workers = 1 if args.single_thread else args.workers
    write_entries(args.out, predict(ckpt, entries, args.tta, workers=workers))
    print(f"wrote {len(entries)} predictions to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    corpus = read_corpus(args.corpus)
    base = RunConfig.from_dict(_load_toml(args.config)) if args.config else RunConfig()
    if args.epochs is not None:
        base = RunConfig(**{**base.to_dict(), "epochs": args.epochs})
    truth_path = Path(args.corpus) / "test_truth.txt"
    truth = read_entries(truth_path, corpus.catalog) if truth_path.exists() else None
    rows = ablate(corpus, base, list(range(args.seeds)), truth, progress=lambda m: log.info(m))
    print(format_ablation(rows))
    if args.json:
        Path(args.json).write_text(json.dumps(
            {r.letter: {"validation": r.validation, "test": r.test} for r in rows}, indent=2))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    limits = threadpool_limits(1) if args.single_thread else contextlib.nullcontext()
    try:
        with limits:
            return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusFormatError, SchemaError, CheckpointError, ValueError, KeyError,
            FileNotFoundError, tomli.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
