"""``jtner`` command line: gen-data, train, eval, compare, tag.

Exit codes: 0 success, 2 usage or validation error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from . import __version__
from .datagen import (
    DatasetError,
    GenConfig,
    build_vocab,
    generate_corpus,
    read_dataset,
    split,
    tokenize,
    write_dataset,
)
from .encoder import EncoderConfig, QueryLengthError
from .evaluation import EvalReport, compare, evaluate, tag_token_lists
from .trainer import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_queries(path):
    if not Path(path).is_file():
        raise UsageError(f"data file not found: {path}")
    try:
        queries = read_dataset(path)
    except DatasetError as e:
        raise UsageError(f"{path}: {e}")
    if not queries:
        raise UsageError(f"data file is empty: {path}")
    return queries


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise UsageError(f"{path}: {e}")


def write_manifest(path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for k, v in entries.items():
            f.write(f"{k}={v}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if "=" in line:
                k, _, v = line.rstrip("\n").partition("=")
                out[k] = v
    return out


def cmd_gen_data(args) -> int:
    try:
        cfg = GenConfig(args.n, args.store_fraction, args.ambiguity_rate, args.seed)
        corpus = generate_corpus(cfg)
        if args.test_out:
            train_q, test_q = split(corpus, args.test_fraction, args.seed)
    except ValueError as e:
        raise UsageError(str(e))
    n_store = sum(q.is_store_lookup for q in corpus)
    if args.test_out:
        write_dataset(args.out, train_q)
        write_dataset(args.test_out, test_q)
        print(f"wrote train={len(train_q)} to {args.out} and test={len(test_q)} to {args.test_out}")
    else:
        write_dataset(args.out, corpus)
        print(f"wrote {len(corpus)} queries to {args.out}")
    print(f"queries={len(corpus)} store_lookup={n_store} other={len(corpus) - n_store}")
    return EXIT_OK


def cmd_train(args) -> int:
    queries = _read_queries(args.data)
    vocab = build_vocab(queries)
    try:
        enc = EncoderConfig(
            vocab_size=len(vocab),
            d_model=args.d_model,
            n_heads=args.n_heads,
            n_layers=args.n_layers,
            d_ff=args.d_ff,
            max_len=args.max_len,
            seed=args.seed,
        )
        cfg = TrainConfig(
            mode=args.mode,
            lr=args.lr,
            intent_lr_factor=args.intent_lr_factor,
            intent_loss_weight=args.intent_loss_weight,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            optimizer=args.optimizer,
            gate_entities_on_intent=args.gate_entities_on_intent,
        )
    except ValueError as e:
        raise UsageError(str(e))
    too_long = [q for q in queries if len(q) > enc.max_len]
    if too_long:
        raise UsageError(f"{len(too_long)} queries exceed --max-len {enc.max_len}")

    manifest = {"tool": "jtner", "tool_version": __version__, "command": "train"}
    manifest["data_path"] = str(args.data)
    manifest["data_sha256"] = _sha256(args.data)
    manifest["ckpt_path"] = str(args.out)
    manifest.update({f"encoder.{k}": v for k, v in enc.to_dict().items()})
    manifest.update({f"train.{k}": v for k, v in cfg.to_dict().items()})
    manifest["n_queries"] = len(queries)
    manifest_path = args.manifest or f"{args.out}.manifest"
    write_manifest(manifest_path, manifest)

    try:
        ckpt = train(queries, cfg, enc, vocab)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.checkpoint is not None:
            save_checkpoint(e.checkpoint, f"{args.out}.lastgood")
            print(f"last good checkpoint saved to {args.out}.lastgood", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(ckpt, args.out)
    print(f"saved checkpoint to {args.out} (steps={ckpt.step_count})")
    return EXIT_OK


def _emit_report(report: EvalReport, fmt: str) -> None:
    print(report.to_table() if fmt == "table" else report.to_jsonl())


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    test = _read_queries(args.test)
    row = evaluate(ckpt, test, ckpt.train.mode)
    _emit_report(EvalReport([row], len(test), ckpt.train.seed), args.format)
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _load_ckpt(args.base)
    multitask = _load_ckpt(args.multitask)
    test = _read_queries(args.test)
    try:
        report = compare(base, multitask, test)
    except ValueError as e:
        raise UsageError(str(e))
    _emit_report(report, args.format)
    return EXIT_OK


def cmd_tag(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    tokens = tokenize(args.query)
    if not tokens:
        raise UsageError("query is empty")
    tagged = tag_token_lists(ckpt, [tokens], gate=args.gate or None)[0]
    for tok, tag, s in zip(tagged.tokens, tagged.tags, tagged.scores):
        print(f"{tok}\t{tag}\t{s:+.4f}")
    is_store, mean = tagged.intent
    print(f"intent={'store_lookup' if is_store else 'other'} mean_score={mean:+.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jtner", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"jtner {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled query corpus")
    p.add_argument("--n", type=int, default=2500)
    p.add_argument("--store-fraction", type=_fraction, default=0.5)
    p.add_argument("--ambiguity-rate", type=_fraction, default=0.4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--test-out", help="also write a stratified held-out split here")
    p.add_argument("--test-fraction", type=_fraction, default=0.2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a base, multitask or summed-loss model")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("base", "multitask", "summed"), default="multitask")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--n-heads", type=int, default=2)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--intent-lr-factor", type=float, default=0.1)
    p.add_argument("--intent-loss-weight", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--gate-entities-on-intent", action="store_true")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="span-level P/R/F1 of one checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--format", choices=("table", "jsonl"), default="table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="compare base and multitask checkpoints on one test set")
    p.add_argument("--base", required=True)
    p.add_argument("--multitask", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--format", choices=("table", "jsonl"), default="table")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("tag", help="tag one query and print per-token intent scores")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--gate", action="store_true", help="suppress STORE tags when intent is negative")
    p.add_argument("query")
    p.set_defaults(func=cmd_tag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, QueryLengthError) as e:
        print(f"jtner {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
