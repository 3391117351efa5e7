"""Command-line front end.

Subcommands: gen-data, train, translate, evaluate, grad-check,
sweep-lambda, inspect.  Exit codes: 0 success, 1 usage, 2 data/format
problem, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .data import (
    decode_sentence,
    encode_sentence,
    gen_synthetic,
    load_parallel,
    load_vocab,
    write_corpus,
)
from .decoding import batch_translate
from .errors import DataError, DomainError, InputError, NumericError, ShapeError
from .evaluation import bleu, bleu_by_length, lambda_sweep, text_chart
from .model import ModelConfig, joint_loss_grad_check
from .training import TrainConfig, train

USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 1, 2, 3

# config-file keys: name -> (which dataclass, attribute)
_MODEL_KEYS = {
    "mode": "mode",
    "embed_dim": "embed_dim",
    "hidden_dim": "hidden_dim",
    "attn_dim": "attn_dim",
    "readout_dim": "readout_dim",
    "lambda": "lam",
    "dropout": "dropout",
    "detach_backward_trace": "detach_backward_trace",
    "share_target_embeddings": "share_target_embeddings",
    "trace_len_factor": "trace_len_factor",
    "trace_len_extra": "trace_len_extra",
    "init_std": "init_std",
}
_TRAIN_KEYS = {
    "learning_rate": "learning_rate",
    "batch_size": "batch_size",
    "clip_norm": "clip_norm",
    "epochs": "epochs",
    "max_len": "max_len",
    "vocab_size": "vocab_size",
    "seed": "seed",
    "dev_every": "dev_every",
    "dev_beam": "dev_beam",
    "rho": "rho",
    "eps": "eps",
    "plain_rmsprop": "plain_rmsprop",
}


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _coerce(text: str):
    t = text.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    if t.lower() == "none":
        return None
    for kind in (int, float):
        try:
            return kind(t)
        except ValueError:
            pass
    return t


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key not in _MODEL_KEYS and key not in _TRAIN_KEYS:
            raise DataError(f"{path}:{lineno}: unknown configuration key {key!r}")
        values[key] = _coerce(value)
    return values


def _build_configs(args) -> tuple[ModelConfig, TrainConfig]:
    file_values = read_config_file(args.config) if args.config else {}
    model_kw = {"src_vocab_size": 1, "tgt_vocab_size": 1}  # real sizes come from the vocabularies
    train_kw = {}
    for key, value in file_values.items():
        if key in _MODEL_KEYS:
            model_kw[_MODEL_KEYS[key]] = value
        else:
            train_kw[_TRAIN_KEYS[key]] = value
    for key, attr in list(_MODEL_KEYS.items()) + list(_TRAIN_KEYS.items()):
        flag = getattr(args, attr, None)  # flags override file values
        if flag is not None:
            (model_kw if key in _MODEL_KEYS else train_kw)[attr] = flag
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--mode", choices=("abd", "l2r", "r2l"))
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--attn-dim", dest="attn_dim", type=int)
    p.add_argument("--readout-dim", dest="readout_dim", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="forward-term weight of the joint objective")
    p.add_argument("--dropout", type=float)
    p.add_argument("--detach-trace", dest="detach_backward_trace", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--share-embeddings", dest="share_target_embeddings", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--trace-len-factor", dest="trace_len_factor", type=int)
    p.add_argument("--trace-len-extra", dest="trace_len_extra", type=int)
    p.add_argument("--init-std", dest="init_std", type=float)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dev-every", dest="dev_every", type=int)
    p.add_argument("--dev-beam", dest="dev_beam", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--plain-rmsprop", dest="plain_rmsprop", action=argparse.BooleanOptionalAction, default=None)


def _load_model_dir(path):
    from .checkpoint import load_checkpoint

    path = Path(path)
    ckpt = path / "model.ckpt" if path.is_dir() else path
    base = ckpt.parent
    params = load_checkpoint(ckpt)
    src_vocab = load_vocab(base / "src.vocab")
    tgt_vocab = load_vocab(base / "tgt.vocab")
    if len(src_vocab) != params.config.src_vocab_size or len(tgt_vocab) != params.config.tgt_vocab_size:
        raise DataError(
            f"vocabulary sizes ({len(src_vocab)}/{len(tgt_vocab)}) do not match the checkpoint "
            f"({params.config.src_vocab_size}/{params.config.tgt_vocab_size})")
    return params, src_vocab, tgt_vocab


def _read_lines(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8").replace("\r\n", "\n")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.split() for line in lines]


# ---------------------------------------------------------------------------
# Subcommand handlers


def cmd_gen_data(args) -> int:
    corpus = gen_synthetic(args.task, args.n, args.seed, (args.len_min, args.len_max), args.vocab)
    src, tgt = write_corpus(corpus, args.out_prefix)
    print(f"wrote {len(corpus)} pairs to {src} and {tgt}")
    return 0


def _load_train_corpora(args):
    corpus = load_parallel(args.src, args.tgt)
    dev = load_parallel(args.dev_src, args.dev_ref[0])
    extra = [_read_lines(p) for p in args.dev_ref[1:]]
    return corpus, dev, extra


def cmd_train(args) -> int:
    model_config, train_config = _build_configs(args)
    corpus, dev, _extra = _load_train_corpora(args)
    result = train(corpus, dev, model_config, train_config, args.out)
    print(f"best dev BLEU {100 * result.best_bleu:.2f}, checkpoint at {result.checkpoint_path}")
    return 0


def cmd_translate(args) -> int:
    params, src_vocab, tgt_vocab = _load_model_dir(args.model)
    if args.mode and args.mode != params.config.mode:
        raise DataError(f"checkpoint was trained in mode {params.config.mode!r}, cannot run {args.mode!r}")
    sources = [encode_sentence(src_vocab, toks) for toks in _read_lines(args.input)]
    for ids in batch_translate(params, sources, beam=args.beam):
        print(" ".join(decode_sentence(tgt_vocab, ids)))
    return 0


def cmd_evaluate(args) -> int:
    hyps = _read_lines(args.hyp)
    ref_files = [_read_lines(p) for p in args.ref]
    for p, rf in zip(args.ref, ref_files):
        if len(rf) != len(hyps):
            raise DataError(f"{p}: {len(rf)} lines vs {len(hyps)} hypotheses")
    reference_sets = [list(refs) for refs in zip(*ref_files)]
    report = bleu(hyps, reference_sets, lowercase=args.lowercase)
    print(report.pretty())
    if args.buckets:
        if not args.src:
            raise InputError("--buckets needs --src to know the source lengths")
        sources = _read_lines(args.src)
        edges = [int(x) for x in args.buckets.split(",")]
        rows = bleu_by_length(hyps, reference_sets, sources, edges, lowercase=args.lowercase)
        print()
        print("bucket\tcount\tBLEU")
        for b in rows:
            print(f"{b.label}\t{b.count}\t{100 * b.report.score:.2f}")
        print()
        print(text_chart([(b.label, 100 * b.report.score) for b in rows]))
    return 0


def cmd_grad_check(args) -> int:
    config = ModelConfig(src_vocab_size=args.src_vocab, tgt_vocab_size=args.tgt_vocab,
                         embed_dim=args.embed_dim, hidden_dim=args.hidden_dim,
                         lam=0.7, dropout=0.0)
    ok = True
    for detach in (False, True):
        cfg = dataclasses.replace(config, detach_backward_trace=detach)
        report = joint_loss_grad_check(cfg, seed=args.seed, eps=args.eps, tol=args.tol,
                                       analytic_scale=2.0 if args.inject_bug else 1.0)
        print(f"detach_backward_trace={detach}: {report.summary()}")
        ok = ok and report.ok
    if not ok:
        return NUMERIC_EXIT
    print("gradient check passed")
    return 0


def cmd_sweep_lambda(args) -> int:
    model_config, train_config = _build_configs(args)
    corpus, dev, _extra = _load_train_corpora(args)
    grid = [float(x) for x in args.grid.split(",")] if args.grid else None
    rows = lambda_sweep(corpus, dev, grid, model_config, train_config, args.out)
    lines = ["lambda\tdev_bleu"] + [f"{lam:g}\t{100 * score:.2f}" for lam, score in rows]
    table = "\n".join(lines)
    print(table)
    print()
    print(text_chart([(f"{lam:g}", 100 * score) for lam, score in rows]))
    Path(args.out, "sweep.tsv").write_text(table + "\n", encoding="utf-8")
    return 0


def cmd_inspect(args) -> int:
    params, _sv, _tv = _load_model_dir(args.model)
    config = params.config
    print(f"mode={config.mode} embed={config.embed_dim} hidden={config.hidden_dim} "
          f"lambda={config.lam:g} vocabs={config.src_vocab_size}/{config.tgt_vocab_size}")
    for p in params.store:
        print(f"{p.name}\t{p.value.rows}\t{p.value.cols}\t{p.group}")
    total = params.store.total_entries()
    print(f"total parameters: {total} ({total / 1e6:.1f}M)")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="abdnmt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic parallel corpus")
    p.add_argument("--task", required=True, choices=("copy", "reverse", "sort", "suffix_checksum"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--len-min", type=int, default=3)
    p.add_argument("--len-max", type=int, default=12)
    p.add_argument("--vocab", type=int, default=20, help="number of content tokens")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--dev-src", required=True)
    p.add_argument("--dev-ref", required=True, action="append")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a file, one sentence per line")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--mode", choices=("abd", "l2r", "r2l"))
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="score hypotheses with corpus BLEU")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True, action="append")
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--buckets", help="comma-separated source-length bucket edges")
    p.add_argument("--src", help="source file (needed for --buckets)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="finite-difference check on a tiny built-in model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=8)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=12)
    p.add_argument("--src-vocab", dest="src_vocab", type=int, default=11)
    p.add_argument("--tgt-vocab", dest="tgt_vocab", type=int, default=13)
    p.add_argument("--inject-bug", action="store_true",
                   help="verification hook: corrupt the analytic gradients; the check must fail")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("sweep-lambda", help="train one model per mixing weight, report dev BLEU")
    p.add_argument("--grid", help="comma-separated lambda values (default 0.5..1.0 step 0.1)")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--dev-src", required=True)
    p.add_argument("--dev-ref", required=True, action="append")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("inspect", help="print a checkpoint's parameter manifest")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError,) as e:
        print(f"abdnmt: {e}", file=sys.stderr)
        return USAGE_EXIT
    except (DataError, ShapeError, DomainError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"abdnmt: {e}", file=sys.stderr)
        return DATA_EXIT
    except NumericError as e:
        print(f"abdnmt: numeric failure: {e}", file=sys.stderr)
        return NUMERIC_EXIT


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
