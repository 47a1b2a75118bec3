"""Command-line entry point: prepare / train / decode / evaluate / salience.

Every subcommand echoes its effective configuration to stderr in a form
that can be re-parsed to reproduce the run, writes files atomically (temp
file + rename), and exits 0 on success, 2 on malformed input files, 1 on
other errors.
"""

from __future__ import annotations

import argparse
import os
import shlex
import sys

from .checkpoint import CheckpointFormatError, load_checkpoint, params_from_arrays
from .corpus import (
    EOS_ID,
    CorpusFormatError,
    LengthLimits,
    StopwordSet,
    TrainingPair,
    Vocabulary,
    build_vocabulary,
    content_positions,
    load_pairs,
    load_vocabulary,
    read_corpus,
    save_vocabulary,
    tokenize,
)
from .decoder import beam_search
from .model import ModelConfig, config_from_params, init_params, source_representations
from .rouge import rouge_l, rouge_n, top_k_salient
from .training import TrainConfig, train
from . import autodiff as ad


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _echo_config(tokens: list) -> None:
    print("config: " + " ".join(shlex.quote(str(t)) for t in tokens), file=sys.stderr)


def _limits(args) -> LengthLimits:
    base = LengthLimits.for_mode(args.mode)
    return LengthLimits(
        max_src_len=args.max_src_len if args.max_src_len is not None else base.max_src_len,
        max_tgt_len=args.max_tgt_len if args.max_tgt_len is not None else base.max_tgt_len,
    )


def _stopwords(args) -> StopwordSet:
    return StopwordSet.from_file(args.stopwords) if args.stopwords else StopwordSet()


def _model_config(args, vocab_size: int, k_e: int, k_h: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        k_e=k_e,
        k_h=k_h,
        damping=args.damping,
        use_sup_context=not args.no_suatt,
        use_unsup_context=not args.no_unatt,
        use_salience_loss=not args.no_salience_loss,
        detach_sup_context=args.detach_sup_context,
    )


def _ablation_tokens(args) -> list:
    out = []
    for flag, name in (("--no-suatt", "no_suatt"), ("--no-unatt", "no_unatt"),
                       ("--no-salience-loss", "no_salience_loss"),
                       ("--detach-sup-context", "detach_sup_context")):
        if getattr(args, name):
            out.append(flag)
    return out


def _load_model(args):
    arrays = load_checkpoint(args.checkpoint)
    vocab = load_vocabulary(args.vocab)
    v, k_e, k_h = config_from_params(arrays)
    if v != vocab.size:
        raise ValueError(f"checkpoint vocabulary size {v} does not match vocabulary file size {vocab.size}")
    params = params_from_arrays(arrays)
    cfg = _model_config(args, v, k_e, k_h)
    return params, vocab, cfg


def _decode_pair(tokens: list, vocab: Vocabulary, limits: LengthLimits, stop: StopwordSet) -> TrainingPair:
    src = tokens[: limits.max_src_len]
    return TrainingPair(
        source_ids=vocab.encode(src),
        target_ids=[EOS_ID],
        salience_labels=[0] * len(src),
        source_tokens=src,
        summary_tokens=[],
        content_mask=content_positions(src, stop),
    )


def cmd_prepare(args) -> int:
    limits = _limits(args)
    _echo_config([
        "prepare", "--corpus", args.corpus, "--vocab-out", args.vocab_out,
        *(["--stopwords", args.stopwords] if args.stopwords else []),
        "--mode", args.mode, "--max-vocab", args.max_vocab, "--min-count", args.min_count,
        "--max-src-len", limits.max_src_len, "--max-tgt-len", limits.max_tgt_len,
    ])
    records = read_corpus(args.corpus)
    token_seqs = []
    for source, summary in records:
        token_seqs.append(tokenize(source, args.mode))
        token_seqs.append(tokenize(summary, args.mode))
    vocab = build_vocabulary(token_seqs, max_size=args.max_vocab, min_count=args.min_count)
    pairs, skipped = load_pairs(records, vocab, limits, _stopwords(args), args.mode)
    positions = sum(len(p.salience_labels) for p in pairs)
    positives = sum(sum(p.salience_labels) for p in pairs)
    save_vocabulary(vocab, args.vocab_out)
    print(f"records: {len(records)}")
    print(f"encoded: {len(pairs)}")
    print(f"skipped: {skipped}")
    print(f"vocabulary: {vocab.size}")
    print(f"positive-label-rate: {positives / positions if positions else 0.0:.4f}")
    return 0


def cmd_train(args) -> int:
    limits = _limits(args)
    _echo_config([
        "train", "--corpus", args.corpus, "--vocab", args.vocab,
        *(["--stopwords", args.stopwords] if args.stopwords else []),
        *(["--val-corpus", args.val_corpus] if args.val_corpus else []),
        "--checkpoint-out", args.checkpoint_out,
        *(["--loss-log", args.loss_log] if args.loss_log else []),
        "--mode", args.mode, "--max-src-len", limits.max_src_len, "--max-tgt-len", limits.max_tgt_len,
        "--epochs", args.epochs, "--seed", args.seed, "--k-e", args.k_e, "--k-h", args.k_h,
        "--damping", args.damping, "--clip-norm", args.clip_norm,
        "--checkpoint-interval", args.checkpoint_interval,
        *(["--no-shuffle"] if args.no_shuffle else []),
        *_ablation_tokens(args),
    ])
    vocab = load_vocabulary(args.vocab)
    stop = _stopwords(args)
    pairs, skipped = load_pairs(read_corpus(args.corpus), vocab, limits, stop, args.mode)
    if skipped:
        print(f"skipped {skipped} records with empty sources", file=sys.stderr)
    val_pairs = None
    if args.val_corpus:
        val_pairs, _ = load_pairs(read_corpus(args.val_corpus), vocab, limits, stop, args.mode)
    cfg = _model_config(args, vocab.size, args.k_e, args.k_h)
    params = init_params(cfg, seed=args.seed)
    train_cfg = TrainConfig(
        epochs=args.epochs,
        seed=args.seed,
        shuffle=not args.no_shuffle,
        clip_norm=args.clip_norm,
        checkpoint_interval=args.checkpoint_interval,
        checkpoint_path=args.checkpoint_out,
    )
    result = train(pairs, params, cfg, train_cfg, val_pairs=val_pairs, log_stream=sys.stdout)
    if args.loss_log:
        _atomic_write(args.loss_log, "".join(line + "\n" for line in result.log_lines))
    print(f"per-token-nll\t{result.per_token_nll:.6f}")
    return 0


def cmd_decode(args) -> int:
    _echo_config([
        "decode", "--checkpoint", args.checkpoint, "--vocab", args.vocab,
        *(["--stopwords", args.stopwords] if args.stopwords else []),
        "--input", args.input, "--output", args.output,
        "--mode", args.mode, "--beam", args.beam,
        *(["--max-tgt-len", args.max_tgt_len] if args.max_tgt_len is not None else []),
        *(["--max-src-len", args.max_src_len] if args.max_src_len is not None else []),
        "--damping", args.damping,
        *_ablation_tokens(args),
    ])
    if args.beam < 1:
        raise ValueError(f"beam must be >= 1, got {args.beam}")
    params, vocab, cfg = _load_model(args)
    limits = _limits(args)
    stop = _stopwords(args)
    lines = []
    with open(args.input, encoding="utf-8") as fh:
        sources = [line.rstrip("\r\n") for line in fh]
    with ad.no_grad():
        for source in sources:
            tokens = tokenize(source, args.mode)
            if not tokens:
                lines.append("")
                continue
            pair = _decode_pair(tokens, vocab, limits, stop)
            ctx = source_representations(pair, params, cfg)
            ids = beam_search(ctx.H, ctx.c_s, ctx.c_u, params, args.beam, limits.max_tgt_len)
            lines.append(" ".join(vocab.decode(ids)))
    _atomic_write(args.output, "".join(line + "\n" for line in lines))
    print(f"decoded: {len(lines)}")
    return 0


def cmd_evaluate(args) -> int:
    _echo_config([
        "evaluate", "--candidates", args.candidates, "--references", args.references,
        "--mode", args.mode,
    ])
    with open(args.candidates, encoding="utf-8") as fh:
        cand_lines = [line.rstrip("\r\n") for line in fh]
    with open(args.references, encoding="utf-8") as fh:
        ref_lines = [line.rstrip("\r\n") for line in fh]
    if len(cand_lines) != len(ref_lines):
        raise CorpusFormatError(min(len(cand_lines), len(ref_lines)) + 1,
                                f"{len(cand_lines)} candidates vs {len(ref_lines)} reference lines")
    sums = {"rouge-1": [0.0, 0.0, 0.0], "rouge-2": [0.0, 0.0, 0.0], "rouge-l": [0.0, 0.0, 0.0]}
    for cand_text, ref_text in zip(cand_lines, ref_lines):
        cand = tokenize(cand_text, args.mode)
        refs = [tokenize(chunk, args.mode) for chunk in ref_text.split("\t")]
        for metric, score in (
            ("rouge-1", rouge_n(cand, refs, 1)),
            ("rouge-2", rouge_n(cand, refs, 2)),
            ("rouge-l", rouge_l(cand, refs)),
        ):
            print(f"{metric}\t{score.precision:.6f}\t{score.recall:.6f}\t{score.f1:.6f}")
            totals = sums[metric]
            totals[0] += score.precision
            totals[1] += score.recall
            totals[2] += score.f1
    n = len(cand_lines)
    print(f"# corpus means over {n} examples")
    for metric in ("rouge-1", "rouge-2", "rouge-l"):
        p, r, f = (x / n if n else 0.0 for x in sums[metric])
        print(f"{metric}\t{p:.6f}\t{r:.6f}\t{f:.6f}")
    return 0


def cmd_salience(args) -> int:
    _echo_config([
        "salience", "--checkpoint", args.checkpoint, "--vocab", args.vocab,
        *(["--stopwords", args.stopwords] if args.stopwords else []),
        "--input", args.input, "--mode", args.mode, "--k", args.k,
        "--head", args.head, "--damping", args.damping,
        *(["--max-src-len", args.max_src_len] if args.max_src_len is not None else []),
        *_ablation_tokens(args),
    ])
    params, vocab, cfg = _load_model(args)
    limits = _limits(args)
    stop = _stopwords(args)
    with open(args.input, encoding="utf-8") as fh:
        sources = [line.rstrip("\r\n") for line in fh]
    with ad.no_grad():
        for source in sources:
            tokens = tokenize(source, args.mode)
            if not tokens:
                print("")
                continue
            pair = _decode_pair(tokens, vocab, limits, stop)
            ctx = source_representations(pair, params, cfg, force_all=True)
            if args.head == "suatt":
                weights = ctx.salience.a_s.data
            else:
                if ctx.graph is None:
                    print("")
                    continue
                weights = ctx.graph.a_u.data
            print(" ".join(top_k_salient(weights, pair.source_tokens, args.k)))
    return 0


def _add_mode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("word", "char"), default="word", help="tokenization mode")
    p.add_argument("--max-src-len", type=int, default=None, help="source truncation length")
    p.add_argument("--max-tgt-len", type=int, default=None, help="summary truncation length")


def _add_ablation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-suatt", action="store_true", help="disable the supervised attention context")
    p.add_argument("--no-unatt", action="store_true", help="disable the word-graph attention context")
    p.add_argument("--no-salience-loss", action="store_true", help="disable the salience loss term")
    p.add_argument("--detach-sup-context", action="store_true",
                   help="stop generation gradients from reaching the salience head")
    p.add_argument("--damping", type=float, default=0.9, help="PageRank damping factor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salsum", description="Salience-attentive abstractive summarization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a vocabulary and report label statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-out", required=True)
    p.add_argument("--stopwords", default=None)
    p.add_argument("--max-vocab", type=int, default=20000)
    p.add_argument("--min-count", type=int, default=1)
    _add_mode_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--stopwords", default=None)
    p.add_argument("--val-corpus", default=None)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--loss-log", default=None)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-e", type=int, default=64)
    p.add_argument("--k-h", type=int, default=64)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--no-shuffle", action="store_true")
    _add_mode_flags(p)
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="generate summaries with beam search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--stopwords", default=None)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=10)
    _add_mode_flags(p)
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score candidate summaries with ROUGE")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True, help="reference file; multiple references per line split by TAB")
    p.add_argument("--mode", choices=("word", "char"), default="word")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("salience", help="print the top-k salient source words")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--stopwords", default=None)
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--head", choices=("suatt", "unatt"), default="suatt")
    _add_mode_flags(p)
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_salience)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CorpusFormatError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ArithmeticError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
