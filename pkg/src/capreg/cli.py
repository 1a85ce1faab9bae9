"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, NumericalError, finite_difference_check
from .decoder import REGRESSION, SOFTMAX, greedy_decode, param_count
from .embedding import EmbeddingTable, build_vocab, train_skipgram
from .encoder import load_features, FeatureFileError
from .harness import (TrainConfig, TrainingAborted, DataError, load_dataset,
                      train, grad_experiment, grad_experiment_csv, depth_study,
                      save_checkpoint, load_checkpoint, CheckpointError)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _data_root() -> Path:
    return Path(os.environ.get("CAPREG_DATA_ROOT", "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() or p.exists() else _data_root() / path


def _build_config(args) -> TrainConfig:
    overrides = {k: getattr(args, k, None) for k in
                 ("depth", "hidden", "embed_dim", "head_kind", "epochs",
                  "lr", "dropout_rate", "seed", "precision")}
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    cfg = TrainConfig()
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg


def cmd_train_embeddings(args) -> int:
    records = load_dataset(_resolve(args.manifest))
    corpus = [cap for rec in records for cap in rec.captions]
    vocab = build_vocab(corpus, min_count=args.min_count)
    table = train_skipgram(corpus, vocab, d=args.dim, window=args.window,
                           epochs=args.epochs, negatives=args.negatives,
                           seed=args.seed or 0)
    table.save(args.output)
    print(f"trained {len(vocab)}-word embedding table (d={args.dim}) -> {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _build_config(args)
    config.validate()
    records = load_dataset(_resolve(args.manifest))
    table = EmbeddingTable.load(args.embeddings)
    config.embed_dim = table.dim
    model, log = train(config, records, table)
    save_checkpoint(model, args.output)
    if args.log:
        log.write_csv(args.log)
    final = log.epochs[-1]["loss"] if log.epochs else float("nan")
    print(f"trained depth-{config.depth} {config.head_kind} model, "
          f"final loss {final:.6g} -> {args.output}")
    return EXIT_OK


def cmd_caption(args) -> int:
    if args.max_len < 1:
        print("error: --max-len must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    table = EmbeddingTable.load(args.embeddings)
    model = load_checkpoint(args.checkpoint, table)
    annots = load_features(_resolve(args.features))
    tokens, trace = greedy_decode(model, annots, max_len=args.max_len,
                                  return_attention=True)
    print(" ".join(tokens))
    if args.attention_csv:
        with open(args.attention_csv, "w", encoding="utf-8") as fh:
            for step, alphas in enumerate(trace):
                fh.write(f"{step}," + ",".join(f"{a:.8g}" for a in alphas) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import EvalCorpus, bleu, rouge_l, cider, tokenize

    def read_jsonl(path):
        out = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    obj = json.loads(line)
                    out[obj["id"]] = obj
        return out

    cands = read_jsonl(_resolve(args.candidates))
    refs = read_jsonl(_resolve(args.references))
    missing = set(cands) - set(refs)
    if missing:
        raise DataError(f"candidates without references: {sorted(missing)[:5]}")
    pairs = [(tokenize(cands[i]["candidate"]),
              [tokenize(r) for r in refs[i]["references"]]) for i in cands]
    corpus = EvalCorpus(pairs)
    report = {f"bleu{n}": bleu(corpus, n) for n in (1, 2, 3, 4)}
    report["rouge_l"] = rouge_l(corpus)
    if len(corpus) >= 2:
        report["cider"] = cider(corpus)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed or 0)
    worst = 0.0
    for trial in range(args.trials):
        x = Tensor(rng.normal(0, 1, 12), requires_grad=True)
        w = rng.normal(0, 1, (5, 12))

        def f(t):
            hidden = ad.tanh(ad.matmul(Tensor(w), t))
            return ad.mse(hidden, Tensor(np.zeros(5)))
        worst = max(worst, finite_difference_check(f, x))
    ok = worst < 1e-4
    print(f"gradient check over {args.trials} trials: worst rel. err {worst:.3g} "
          f"({'PASS' if ok else 'FAIL'})")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_grad_experiment(args) -> int:
    report = grad_experiment(args.vocab_size, args.dim, args.depth,
                             trials=args.trials, seed=args.seed or 0)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(grad_experiment_csv(report))
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_depth_study(args) -> int:
    config = _build_config(args)
    records = load_dataset(_resolve(args.manifest))
    table = EmbeddingTable.load(args.embeddings)
    config.embed_dim = table.dim
    rows = depth_study(config, args.depths, records, table)
    print(json.dumps(rows, indent=2))
    if args.csv:
        keys = list(rows[0].keys())
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(",".join(keys) + "\n")
            for row in rows:
                fh.write(",".join(str(row[k]) for k in keys) + "\n")
    return EXIT_OK


def cmd_param_report(args) -> int:
    rows = []
    for depth in args.depths:
        row = {"depth": depth}
        for kind in (REGRESSION, SOFTMAX):
            row[kind] = param_count(depth, args.hidden, args.dim,
                                    args.vocab_size, args.annot_dim,
                                    args.attention_k, kind)
        rows.append(row)
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capreg",
                                     description="Caption decoder toolkit")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", type=str, default=None)
    parser.add_argument("--precision", choices=("f32", "f64"), default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-embeddings", help="train skip-gram embeddings on caption corpus")
    p.add_argument("manifest")
    p.add_argument("output")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--min-count", type=int, default=1, dest="min_count")
    p.set_defaults(func=cmd_train_embeddings)

    p = sub.add_parser("train", help="train a caption decoder")
    p.add_argument("manifest")
    p.add_argument("embeddings")
    p.add_argument("output")
    p.add_argument("--log", type=str, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--head-kind", choices=(REGRESSION, SOFTMAX),
                   default=None, dest="head_kind")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--dropout-rate", type=float, default=None, dest="dropout_rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="greedy-decode a caption for a feature file")
    p.add_argument("checkpoint")
    p.add_argument("embeddings")
    p.add_argument("features")
    p.add_argument("--max-len", type=int, default=20, dest="max_len")
    p.add_argument("--attention-csv", type=str, default=None, dest="attention_csv")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", help="score candidate captions against references")
    p.add_argument("candidates")
    p.add_argument("references")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("grad-experiment", help="output-layer gradient magnitude study")
    p.add_argument("--vocab-size", type=int, default=20000, dest="vocab_size")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--csv", type=str, default=None)
    p.set_defaults(func=cmd_grad_experiment)

    p = sub.add_parser("depth-study", help="train and score at multiple depths")
    p.add_argument("manifest")
    p.add_argument("embeddings")
    p.add_argument("--depths", type=int, nargs="+", default=[1, 2, 5, 8, 10])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--csv", type=str, default=None)
    p.set_defaults(func=cmd_depth_study)

    p = sub.add_parser("param-report", help="closed-form parameter counts")
    p.add_argument("--depths", type=int, nargs="+", default=[1, 2, 5, 8, 10])
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=20000, dest="vocab_size")
    p.add_argument("--annot-dim", type=int, default=64, dest="annot_dim")
    p.add_argument("--attention-k", type=int, default=32, dest="attention_k")
    p.set_defaults(func=cmd_param_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if args.precision:
        ad.set_precision(args.precision)
    try:
        return args.func(args)
    except (ValueError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FeatureFileError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, NumericalError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        if isinstance(e, TrainingAborted):
            print(json.dumps(e.dump, indent=2), file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
