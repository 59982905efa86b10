"""Command-line front end.

One executable, `synlm`, exposing the pipeline end to end.  Output is
line-delimited JSON with sorted keys; every run starts with a record
echoing its fully resolved configuration, and all floats are printed at
nine significant digits so runs diff cleanly.

Exit codes: 0 success, 1 usage error, 2 data error (missing or
malformed files, mismatched artifacts), 3 numeric or search failure
(divergence, NaN, exhausted beam, failed gradient check).
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__, checks
from . import model as M
from . import tensor as T
from .beam import BeamConfig, BeamExhausted
from .beam import parse as beam_parse
from .beam import surprisal as beam_surprisal
from .evaluation import (BadSuiteFile, MissingGoldParse, eval_pairs,
                         eval_suite, load_pairs, load_suite, perplexity,
                         write_pairs)
from .synthdata import (SynthError, agreement_grammar, agreement_pairs,
                        sample_corpus)
from .train import (NumericFailure, TrainConfig, TrainError, build_vocabs,
                    model_config_for, train, write_metrics)
from .transitions import TransitionError, oracle, write_oracle_file
from .treebank import (TreebankError, read_corpus, render_tree, tree_yield,
                       write_corpus)
from .vocab import VocabError, build_joint_vocab, build_ngram_vocab, \
    build_token_vocab

log = logging.getLogger(__name__)

_DATA_ERRORS = (FileNotFoundError, IsADirectoryError, PermissionError,
                TreebankError, TransitionError, VocabError, BadSuiteFile,
                MissingGoldParse, SynthError, TrainError, M.ModelError,
                json.JSONDecodeError)
_NUMERIC_ERRORS = (NumericFailure, BeamExhausted, T.TensorError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is 1
        raise UsageError(message)


def _nine(value):
    """Round every float to nine significant digits, recursively."""
    if isinstance(value, float):
        return float(f"{value:.9g}")
    if isinstance(value, dict):
        return {k: _nine(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_nine(v) for v in value]
    return value


def _emit(record: dict) -> None:
    print(json.dumps(_nine(record), sort_keys=True))


def _echo_config(args) -> None:
    values = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    _emit({"record": "config", "version": __version__, **values})


def _beam_config(args) -> BeamConfig:
    try:
        return BeamConfig(action_beam=args.action_beam,
                          word_beam=args.word_beam,
                          fast_track=args.fast_track,
                          max_struct_per_word=args.max_struct_per_word)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read_sentences(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# subcommands

def cmd_oracle(args) -> int:
    trees = read_corpus(args.trees)
    write_oracle_file((oracle(t) for t in trees), args.out)
    _emit({"record": "summary", "trees": len(trees), "out": args.out})
    return 0


def cmd_vocab(args) -> int:
    trees = read_corpus(args.trees)
    dev = read_corpus(args.dev) if args.dev else []
    tokens = build_token_vocab(trees, args.min_count)
    summary = {"record": "summary", "tokens": len(tokens),
               "token_digest": tokens.digest()}
    tokens.save(args.out_tokens)
    if args.out_joint:
        joint = build_joint_vocab(tokens, trees + dev)
        joint.save(args.out_joint)
        summary.update(joint=len(joint), joint_digest=joint.digest())
    if args.out_ngrams:
        ngrams = build_ngram_vocab(oracle(t) for t in trees + dev)
        ngrams.save(args.out_ngrams)
        summary.update(ngrams=len(ngrams), ngram_digest=ngrams.digest())
    _emit(summary)
    return 0


def cmd_train(args) -> int:
    train_trees = read_corpus(args.trees)
    dev_trees = read_corpus(args.dev) if args.dev else []
    vocabs = build_vocabs(args.variant, train_trees, dev_trees,
                          args.min_count)
    model_config = model_config_for(
        args.variant, vocabs, hidden_size=args.hidden_size,
        n_heads=args.n_heads, n_layers=args.n_layers, ff_mult=args.ff_mult,
        max_len=args.max_len, dropout_p=args.dropout)
    train_config = TrainConfig(
        lr=args.lr, weight_decay=args.weight_decay,
        batch_size=args.batch_size, max_epochs=args.epochs,
        patience=args.patience, seed=args.seed, loss_norm=args.loss_norm,
        grad_clip=args.grad_clip, sclm_lambda=args.sclm_lambda)
    result = train(model_config, train_trees, dev_trees, vocabs,
                   train_config)
    for entry in result.history:
        _emit({"record": "epoch", "epoch": entry["epoch"],
               "split": entry["split"], "loss": entry["loss"],
               "tokens": entry["tokens"]})
    extra = {"train_config": train_config.to_dict(),
             "best_epoch": result.best_epoch,
             "best_dev_loss": result.best_dev_loss}
    M.save_checkpoint(args.out, model_config, result.params, vocabs, extra)
    if args.metrics:
        write_metrics(result.history, args.metrics)
    _emit({"record": "summary", "best_epoch": result.best_epoch,
           "best_dev_loss": result.best_dev_loss, "steps": result.steps,
           "out": args.out})
    return 0


def cmd_parse(args) -> int:
    config, params, vocabs, _ = M.load_checkpoint(args.ckpt)
    beam_config = _beam_config(args)
    tree = beam_parse(config, params, vocabs, args.sentence.split(),
                      beam_config)
    _emit({"record": "parse", "sentence": args.sentence,
           "tree": render_tree(tree), "variant": config.variant,
           "beam_config": beam_config.to_dict()})
    return 0


def cmd_surprisal(args) -> int:
    config, params, vocabs, _ = M.load_checkpoint(args.ckpt)
    beam_config = _beam_config(args)
    continuation = args.continuation.split()
    if not continuation:
        raise UsageError("--continuation must contain at least one word")
    bits = beam_surprisal(config, params, vocabs, args.prefix.split(),
                          continuation, beam_config)
    _emit({"record": "surprisal", "prefix": args.prefix,
           "continuation": args.continuation, "surprisal_bits": bits,
           "variant": config.variant,
           "beam_config": beam_config.to_dict()})
    return 0


def cmd_eval_suite(args) -> int:
    config, params, vocabs, _ = M.load_checkpoint(args.ckpt)
    beam_config = _beam_config(args)
    per_file = []
    total_items = total_passed = 0
    for path in args.suite:
        items = load_suite(path, args.limit)
        records, summary = eval_suite(config, params, vocabs, items,
                                      beam_config)
        for record in records:
            _emit({"record": "item", "suite": path, **record})
        per_file.append({"suite": path, **summary})
        total_items += summary["items"]
        total_passed += summary["passed"]
    _emit({"record": "summary", "suites": per_file,
           "macro_accuracy": sum(f["accuracy"] for f in per_file) / len(per_file),
           "micro_accuracy": total_passed / total_items,
           "items": total_items, "beam_config": beam_config.to_dict()})
    return 0


def cmd_eval_pairs(args) -> int:
    config, params, vocabs, _ = M.load_checkpoint(args.ckpt)
    beam_config = _beam_config(args)
    per_file = []
    total_pairs = total_correct = 0
    for path in args.pairs:
        pairs = load_pairs(path, args.limit)
        records, summary = eval_pairs(config, params, vocabs, pairs,
                                      beam_config)
        for record in records:
            _emit({"record": "pair", "file": path, **record})
        per_file.append({"file": path, **summary})
        total_pairs += summary["pairs"]
        total_correct += summary["correct"]
    _emit({"record": "summary", "files": per_file,
           "accuracy": total_correct / total_pairs, "pairs": total_pairs,
           "beam_config": beam_config.to_dict()})
    return 0


def cmd_eval_ppl(args) -> int:
    config, params, vocabs, _ = M.load_checkpoint(args.ckpt)
    items = (read_corpus(args.trees) if args.trees
             else _read_sentences(args.sentences))
    result = perplexity(config, params, vocabs, items)
    _emit({"record": "perplexity", "variant": config.variant,
           "items": len(items), **result})
    return 0


def cmd_gradcheck(args) -> int:
    results = checks.gradcheck_all(args.seed, args.tol)
    for name, ok, detail in results:
        _emit({"record": "check", "name": name, "ok": ok, "detail": detail})
    ok = all(r[1] for r in results)
    _emit({"record": "summary", "ok": ok})
    return 0 if ok else 3


def cmd_selftest(args) -> int:
    results = checks.selftest(args.seed)
    for name, ok, detail in results:
        _emit({"record": "check", "name": name, "ok": ok, "detail": detail})
    ok = all(r[1] for r in results)
    _emit({"record": "summary", "ok": ok})
    return 0 if ok else 3


def cmd_synthdata(args) -> int:
    grammar = agreement_grammar(args.seed)
    trees = sample_corpus(grammar, args.n)
    write_corpus(trees, args.out)
    summary = {"record": "summary", "grammar": args.grammar,
               "trees": len(trees), "out": args.out}
    if args.pairs_out:
        held_out = {" ".join(tree_yield(t)) for t in trees}
        pairs = agreement_pairs(args.n_pairs, args.seed + 1,
                                exclude=held_out)
        write_pairs(pairs, args.pairs_out)
        summary.update(pairs=len(pairs), pairs_out=args.pairs_out)
    _emit(summary)
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1,
                        help="worker-thread cap for eval/beam (recorded; "
                             "execution is single-threaded)")
    common.add_argument("--float64", action="store_true",
                        help="run every tensor op in float64")
    common.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])

    beam = _Parser(add_help=False)
    beam.add_argument("--action-beam", type=int, default=100)
    beam.add_argument("--word-beam", type=int, default=10)
    beam.add_argument("--fast-track", type=int, default=5)
    beam.add_argument("--max-struct-per-word", type=int, default=16)

    parser = _Parser(prog="synlm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle", parents=[common],
                       help="convert trees to action sequences")
    p.add_argument("--trees", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("vocab", parents=[common],
                       help="fit and save vocabularies")
    p.add_argument("--trees", required=True)
    p.add_argument("--dev")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out-tokens", required=True)
    p.add_argument("--out-joint")
    p.add_argument("--out-ngrams")
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--trees", required=True)
    p.add_argument("--dev")
    p.add_argument("--variant", required=True, choices=M.VARIANTS)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="write per-epoch records here")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--hidden-size", type=int, default=128)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-layers", type=int, default=4)
    p.add_argument("--ff-mult", type=int, default=4)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--loss-norm", default="token",
                   choices=["token", "sequence"])
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--sclm-lambda", type=float, default=1.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("parse", parents=[common, beam],
                       help="best parse of one sentence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sentence", required=True)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("surprisal", parents=[common, beam],
                       help="surprisal of a continuation given a prefix")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prefix", default="")
    p.add_argument("--continuation", required=True)
    p.set_defaults(func=cmd_surprisal)

    p = sub.add_parser("eval-suite", parents=[common, beam],
                       help="targeted syntactic evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--suite", required=True, nargs="+")
    p.add_argument("--limit", type=int, default=None,
                   help="first N items per file")
    p.set_defaults(func=cmd_eval_suite)

    p = sub.add_parser("eval-pairs", parents=[common, beam],
                       help="minimal-pair likelihood comparison")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True, nargs="+")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_eval_pairs)

    p = sub.add_parser("eval-ppl", parents=[common],
                       help="per-word perplexity")
    p.add_argument("--ckpt", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--trees")
    group.add_argument("--sentences")
    p.set_defaults(func=cmd_eval_ppl)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="tape gradients vs finite differences")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", parents=[common],
                       help="run every oracle-backed correctness check")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("synthdata", parents=[common],
                       help="sample a synthetic corpus")
    p.add_argument("--grammar", default="agreement", choices=["agreement"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs-out", help="also emit minimal pairs here")
    p.add_argument("--n-pairs", type=int, default=200)
    p.set_defaults(func=cmd_synthdata)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"synlm: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper())
    if args.float64:
        T.set_default_dtype(np.float64)
    _echo_config(args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"synlm: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"synlm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"synlm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
