"""Batching, the RMSprop update, and the training loop with dev-set selection."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tz
from .checkpoint import save_checkpoint
from .data import PAD_ID, ParallelCorpus, Vocabulary, build_vocab, decode_sentence, encode_corpus
from .decoding import translate
from .errors import DataError, InputError, NumericError
from .evaluation import bleu
from .model import ModelConfig, init_model, joint_loss
from .tensor import ParamStore, clip_global_norm, global_grad_norm

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 80
    clip_norm: float = 1.0
    epochs: int = 5
    max_len: int = 50          # sentence-pair length filter
    vocab_size: int = 30000
    seed: int = 1
    dev_every: int = 0         # updates between dev evaluations; 0 = end of each epoch
    dev_beam: int = 10
    rho: float = 0.95
    eps: float = 1e-4
    plain_rmsprop: bool = False

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "clip_norm", "epochs", "max_len", "vocab_size"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")


@dataclass
class Batch:
    src: np.ndarray        # B x N token ids
    src_mask: np.ndarray   # B x N, 1.0 on real tokens
    tgt: np.ndarray        # B x M
    tgt_mask: np.ndarray
    rev_tgt: np.ndarray    # B x M, targets reversed per sentence
    rev_mask: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]


def _pad_block(rows):
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.float32)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return ids, mask


def make_batches(pairs, batch_size: int, max_len: int, seed: int) -> list[Batch]:
    """Filter overlong pairs, shuffle deterministically, pad per batch."""
    kept = [(s, t) for s, t in pairs if len(s) <= max_len and len(t) <= max_len]
    if not kept:
        raise DataError(f"no sentence pairs left after filtering to length <= {max_len}")
    order = np.random.default_rng(seed).permutation(len(kept))
    batches = []
    for start in range(0, len(kept), batch_size):
        chunk = [kept[i] for i in order[start:start + batch_size]]
        src, src_mask = _pad_block([s for s, _ in chunk])
        tgt, tgt_mask = _pad_block([t for _, t in chunk])
        rev, rev_mask = _pad_block([t[::-1] for _, t in chunk])
        batches.append(Batch(src, src_mask, tgt, tgt_mask, rev, rev_mask))
    return batches


# ---------------------------------------------------------------------------
# Optimizer


class OptimizerState:
    """Per-parameter first/second moments for the variance-normalized RMSprop."""

    def __init__(self, store: ParamStore):
        self.m = {p.name: np.zeros_like(p.value.data) for p in store}
        self.n = {p.name: np.zeros_like(p.value.data) for p in store}
        self.step = 0


def rmsprop_update(state: OptimizerState, store: ParamStore, lr: float, rho: float = 0.95,
                   eps: float = 1e-4, plain: bool = False) -> None:
    """One update following Graves' zero-momentum variant, then clear gradients.

        n <- rho n + (1-rho) g^2;  m <- rho m + (1-rho) g
        w <- w - lr * g / sqrt(n - m^2 + eps)

    ``plain`` drops the m^2 term (classical RMSprop) for comparison runs.
    """
    for p in store:
        g = p.grad
        n = state.n[p.name]
        n *= rho
        n += (1.0 - rho) * g * g
        if plain:
            denom = n + eps
        else:
            m = state.m[p.name]
            m *= rho
            m += (1.0 - rho) * g
            var = n - m * m
            low = float(var.min()) if var.size else 0.0
            if low < -1e-7:
                raise NumericError(f"rmsprop variance estimate went negative ({low:.3e}) for {p.name!r}")
            denom = np.maximum(var, 0.0) + eps
        delta = lr * g / np.sqrt(denom)
        if not np.isfinite(delta).all():
            raise NumericError(f"non-finite rmsprop update for parameter {p.name!r}")
        p.value.data -= delta
        g.fill(0.0)
    state.step += 1


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class EpochSummary:
    epoch: int
    mean_loss: float
    forward_ppl: float
    backward_ppl: float
    dev_bleu: float


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    epoch_summaries: list
    best_bleu: float


def _metrics_line(epoch, step, loss, fnll, bnll, norm, dev=""):
    def num(v):
        return "nan" if (v is None or math.isnan(v)) else f"{v:.6f}"

    return f"{epoch}\t{step}\t{num(loss)}\t{num(fnll)}\t{num(bnll)}\t{norm:.6f}\t{dev}"


def _dev_bleu(params, dev_src_ids, dev_refs, tgt_vocab, beam):
    hyps = [decode_sentence(tgt_vocab, translate(params, s, beam)) for s in dev_src_ids]
    return bleu(hyps, [[r] for r in dev_refs]).score


def train(corpus: ParallelCorpus, dev: ParallelCorpus, model_config: ModelConfig,
          train_config: TrainConfig, out_dir, src_vocab: Vocabulary | None = None,
          tgt_vocab: Vocabulary | None = None) -> TrainResult:
    """Train on ``corpus`` with dev-BLEU model selection.

    Writes ``model.ckpt`` (best dev BLEU), ``src.vocab``/``tgt.vocab``, and
    ``metrics.tsv`` (one tab-separated line per update: epoch, step, loss,
    forward nll, backward nll, gradient norm, dev BLEU when evaluated) under
    ``out_dir``.  Identical seeds and inputs reproduce identical files.
    """
    from .data import save_vocab

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = train_config
    if src_vocab is None:
        src_vocab = build_vocab(corpus.sources(), cfg.vocab_size)
    if tgt_vocab is None:
        tgt_vocab = build_vocab(corpus.targets(), cfg.vocab_size)
    save_vocab(src_vocab, out_dir / "src.vocab")
    save_vocab(tgt_vocab, out_dir / "tgt.vocab")

    model_config = dataclasses.replace(
        model_config, src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab))
    params = init_model(model_config, cfg.seed)
    opt = OptimizerState(params.store)

    train_ids = encode_corpus(corpus, src_vocab, tgt_vocab)
    dev_src_ids = [ids for ids, _ in encode_corpus(dev, src_vocab, tgt_vocab)]
    dev_refs = dev.targets()

    ckpt_path = out_dir / "model.ckpt"
    metrics_path = out_dir / "metrics.tsv"
    lines = ["# epoch\tstep\tloss\tforward_nll\tbackward_nll\tgrad_norm\tdev_bleu"]
    summaries = []
    best_bleu = -1.0
    step = 0

    def evaluate(epoch, loss, fnll, bnll, norm):
        nonlocal best_bleu
        score = _dev_bleu(params, dev_src_ids, dev_refs, tgt_vocab, cfg.dev_beam)
        lines.append(_metrics_line(epoch, step, loss, fnll, bnll, norm, f"{100.0 * score:.2f}"))
        if score > best_bleu:
            best_bleu = score
            save_checkpoint(ckpt_path, params)
        return score

    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(train_ids, cfg.batch_size, cfg.max_len, cfg.seed + epoch)
        epoch_loss, epoch_f, epoch_b, epoch_ft, epoch_bt = 0.0, 0.0, 0.0, 0, 0
        score = math.nan
        for batch in batches:
            rng = np.random.default_rng([cfg.seed, epoch, step])
            res = joint_loss(params, batch, train=True, rng=rng)
            res.loss.backward()
            norm = global_grad_norm(params.store)
            clip_global_norm(params.store, cfg.clip_norm)
            rmsprop_update(opt, params.store, cfg.learning_rate, cfg.rho, cfg.eps, cfg.plain_rmsprop)
            step += 1
            loss = res.loss.item()
            epoch_loss += loss
            if not math.isnan(res.forward_nll):
                epoch_f += res.forward_nll * len(batch)
                epoch_ft += res.forward_tokens
            if not math.isnan(res.backward_nll):
                epoch_b += res.backward_nll * len(batch)
                epoch_bt += res.backward_tokens
            lines.append(_metrics_line(epoch, step, loss, res.forward_nll, res.backward_nll, norm))
            if cfg.dev_every > 0 and step % cfg.dev_every == 0:
                score = evaluate(epoch, loss, res.forward_nll, res.backward_nll, norm)
        if cfg.dev_every == 0:
            score = evaluate(epoch, loss, res.forward_nll, res.backward_nll, norm)
        fppl = math.exp(min(epoch_f / epoch_ft, 700.0)) if epoch_ft else math.nan
        bppl = math.exp(min(epoch_b / epoch_bt, 700.0)) if epoch_bt else math.nan
        summaries.append(EpochSummary(epoch, epoch_loss / len(batches), fppl, bppl, score))
        logger.info("epoch %d: mean loss %.4f, fwd ppl %.2f, bwd ppl %.2f, dev BLEU %s",
                    epoch, epoch_loss / len(batches), fppl, bppl,
                    "-" if math.isnan(score) else f"{100 * score:.2f}")

    metrics_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return TrainResult(ckpt_path, metrics_path, summaries, best_bleu)
