"""Vocabularies, parallel corpora, and synthetic desk-scale tasks.

File conventions: corpora are UTF-8 text, one sentence per line, tokens
separated by whitespace.  A vocabulary file lists one token per line, the
line number being the id; the first four lines are always the specials.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InputError

PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<s>", "</s>", "<unk>"
SPECIAL_TOKENS = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class Vocabulary:
    """Bijective token <-> id map with the four specials pinned at ids 0-3."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:4] != SPECIAL_TOKENS:
            raise DataError(f"vocabulary must start with {SPECIAL_TOKENS}, got {tokens[:4]}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            dupes = [t for t, c in Counter(tokens).items() if c > 1]
            raise DataError(f"duplicate tokens in vocabulary: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise IndexError(f"token id {idx} out of range for vocabulary of {len(self.tokens)}")
        return self.tokens[idx]


def build_vocab(sentences, max_size: int) -> Vocabulary:
    """Most frequent tokens, ties broken by first occurrence; specials prepended."""
    if max_size <= 4:
        raise InputError(f"max_size must exceed 4 (the specials), got {max_size}")
    counts: Counter = Counter()
    first_seen: dict[str, int] = {}
    n_tokens = 0
    for sent in sentences:
        for tok in sent:
            counts[tok] += 1
            if tok not in first_seen:
                first_seen[tok] = n_tokens
            n_tokens += 1
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    return Vocabulary(SPECIAL_TOKENS + ranked[: max_size - 4])


def encode_sentence(vocab: Vocabulary, tokens) -> list[int]:
    return [vocab.id(t) for t in tokens]


def decode_sentence(vocab: Vocabulary, ids) -> list[str]:
    return [vocab.token(int(i)) for i in ids]


def save_vocab(vocab: Vocabulary, path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocabulary(lines)


# ---------------------------------------------------------------------------
# Parallel corpora


@dataclass
class ParallelCorpus:
    pairs: list  # of (source tokens, target tokens)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def sources(self):
        return [s for s, _ in self.pairs]

    def targets(self):
        return [t for _, t in self.pairs]


def load_parallel(src_path, tgt_path) -> ParallelCorpus:
    """Pair line i of both files; CRLF is normalized, tokens split on whitespace."""

    def read(path):
        text = Path(path).read_text(encoding="utf-8").replace("\r\n", "\n")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return lines

    src_lines, tgt_lines = read(src_path), read(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"line counts differ: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}")
    pairs = []
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines), start=1):
        s_toks, t_toks = s.split(), t.split()
        if not s_toks or not t_toks:
            raise DataError(f"empty sentence at line {i}")
        pairs.append((s_toks, t_toks))
    return ParallelCorpus(pairs)


def write_corpus(corpus: ParallelCorpus, out_prefix) -> tuple[Path, Path]:
    src_path = Path(f"{out_prefix}.src")
    tgt_path = Path(f"{out_prefix}.tgt")
    src_path.write_text("\n".join(" ".join(s) for s, _ in corpus) + "\n", encoding="utf-8")
    tgt_path.write_text("\n".join(" ".join(t) for _, t in corpus) + "\n", encoding="utf-8")
    return src_path, tgt_path


def encode_corpus(corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    return [
        (encode_sentence(src_vocab, s), encode_sentence(tgt_vocab, t)) for s, t in corpus
    ]


# ---------------------------------------------------------------------------
# Synthetic tasks

SYNTHETIC_TASKS = ("copy", "reverse", "sort", "suffix_checksum")
EVEN_MARKER, ODD_MARKER = "EVEN", "ODD"


def gen_synthetic(task: str, n: int, seed: int, len_range=(3, 12), vocab_size: int = 20) -> ParallelCorpus:
    """Deterministic parallel corpus for one of the toy transduction tasks.

    Tokens are t0 .. t{vocab_size-1}.  Tasks: ``copy`` (target = source),
    ``reverse`` (target = reversed source), ``sort`` (target = source sorted
    by token index), ``suffix_checksum`` (target = source plus EVEN/ODD by
    the parity of the summed token indices, a feature of the whole source).
    """
    if task not in SYNTHETIC_TASKS:
        raise InputError(f"unknown task {task!r}; choose from {SYNTHETIC_TASKS}")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise InputError(f"bad length range {len_range}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        idx = rng.integers(0, vocab_size, size=length)
        src = [f"t{k}" for k in idx]
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = src[::-1]
        elif task == "sort":
            tgt = [f"t{k}" for k in sorted(idx)]
        else:
            marker = EVEN_MARKER if int(idx.sum()) % 2 == 0 else ODD_MARKER
            tgt = src + [marker]
        pairs.append((src, tgt))
    return ParallelCorpus(pairs)
