"""BLEU scoring and the sweep/bucket reports.

``bleu`` is the unsmoothed corpus metric: modified n-gram precisions with
per-sentence clipping against the best of the references, and a brevity
penalty from the closest reference length.  ``sentence_bleu`` is a
smoothed per-sentence diagnostic and is labeled as such.
"""

from __future__ import annotations

import dataclasses
import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import InputError

DEFAULT_LAMBDA_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def _ngrams(tokens, n: int):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _lower(sent):
    return [t.lower() if isinstance(t, str) else t for t in sent]


@dataclass
class BleuReport:
    score: float                  # in [0, 1]
    precisions: list              # modified p_1 .. p_max_n
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list = field(default_factory=list)   # clipped n-gram matches per order
    totals: list = field(default_factory=list)    # candidate n-gram counts per order

    def pretty(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {100 * self.score:.2f}  ({ps}, BP={self.brevity_penalty:.4f}, "
                f"hyp_len={self.hyp_len}, ref_len={self.ref_len})")


def bleu(hyps, reference_sets, max_n: int = 4, lowercase: bool = False) -> BleuReport:
    """Corpus BLEU of token-list hypotheses against per-sentence reference sets.

    ``reference_sets[i]`` is the list of references for hypothesis i.  The
    brevity penalty uses, per sentence, the reference length closest to the
    hypothesis length (ties going to the shorter one).  Orders for which the
    whole corpus has no candidate n-grams count as vacuously perfect, so a
    corpus identical to its references always scores 1.
    """
    if len(hyps) != len(reference_sets):
        raise InputError(f"{len(hyps)} hypotheses vs {len(reference_sets)} reference sets")
    if not hyps:
        raise InputError("nothing to score")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hyps, reference_sets):
        if not refs:
            raise InputError("every hypothesis needs at least one reference")
        if lowercase:
            hyp = _lower(hyp)
            refs = [_lower(r) for r in refs]
        hyp_len += len(hyp)
        ref_len += min((len(r) for r in refs), key=lambda L: (abs(L - len(hyp)), L))
        for n in range(1, max_n + 1):
            counts = Counter(_ngrams(hyp, n))
            if not counts:
                continue
            best = Counter()
            for ref in refs:
                rc = Counter(_ngrams(ref, n))
                for g in counts:
                    best[g] = max(best[g], rc[g])
            matches[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())
    precisions = [(m / t) if t else 1.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if all(p > 0 for p in precisions):
        score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    else:
        score = 0.0
    return BleuReport(score, precisions, bp, hyp_len, ref_len, matches, totals)


def sentence_bleu(hyp, refs, max_n: int = 4, lowercase: bool = False) -> float:
    """Per-sentence diagnostic BLEU with add-one smoothing on orders >= 2."""
    report = bleu([hyp], [refs], max_n=max_n, lowercase=lowercase)
    smoothed = [report.precisions[0]]
    for m, t in zip(report.matches[1:], report.totals[1:]):
        smoothed.append((m + 1) / (t + 1))
    if smoothed[0] == 0:
        return 0.0
    return report.brevity_penalty * math.exp(sum(math.log(p) for p in smoothed) / max_n)


def sequence_accuracy(hyps, refs) -> float:
    """Fraction of hypotheses exactly equal to their reference."""
    if len(hyps) != len(refs):
        raise InputError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise InputError("nothing to score")
    return sum(list(h) == list(r) for h, r in zip(hyps, refs)) / len(hyps)


# ---------------------------------------------------------------------------
# Length-bucketed evaluation


@dataclass
class LengthBucket:
    low: int       # exclusive lower bound (0 for the first bucket)
    high: int      # inclusive upper bound; -1 marks the overflow bucket
    count: int
    report: BleuReport

    @property
    def label(self) -> str:
        return f">{self.low}" if self.high < 0 else f"{self.low + 1}-{self.high}"


def bleu_by_length(hyps, reference_sets, sources, bucket_edges, max_n: int = 4,
                   lowercase: bool = False) -> list[LengthBucket]:
    """Corpus BLEU within buckets of source length; edges are inclusive upper bounds.

    A sentence whose source length equals an edge falls in the lower bucket;
    anything longer than the last edge goes to an overflow bucket.  Buckets
    with no sentences are omitted.
    """
    edges = list(bucket_edges)
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])) or edges[0] <= 0:
        raise InputError(f"bucket edges must be positive and strictly increasing, got {edges}")
    if not (len(hyps) == len(reference_sets) == len(sources)):
        raise InputError("hypotheses, references, and sources must align")
    bounds = [(0, edges[0])] + [(a, b) for a, b in zip(edges, edges[1:])] + [(edges[-1], -1)]
    buckets = []
    for low, high in bounds:
        idx = [i for i, s in enumerate(sources)
               if len(s) > low and (high < 0 or len(s) <= high)]
        if not idx:
            continue
        report = bleu([hyps[i] for i in idx], [reference_sets[i] for i in idx],
                      max_n=max_n, lowercase=lowercase)
        buckets.append(LengthBucket(low, high, len(idx), report))
    return buckets


# ---------------------------------------------------------------------------
# Lambda sweep


def lambda_sweep(corpus, dev, lambdas, model_config, train_config, work_dir) -> list[tuple]:
    """Train one model per mixing weight (shared seed) and report dev BLEU."""
    from .training import train  # training imports bleu from here

    values = sorted(DEFAULT_LAMBDA_GRID if lambdas is None else lambdas)
    if not values or any(not 0.0 <= v <= 1.0 for v in values):
        raise InputError(f"lambda values must lie in [0, 1], got {values}")
    rows = []
    for lam in values:
        cfg = dataclasses.replace(model_config, lam=lam)
        result = train(corpus, dev, cfg, train_config, f"{work_dir}/lam{lam:g}")
        rows.append((lam, result.best_bleu))
    return rows


def text_chart(rows, width: int = 40, value_format: str = "{:.2f}") -> str:
    """Plain-text column chart: one labeled bar per (label, value) row."""
    rows = [(str(label), float(value)) for label, value in rows]
    top = max((v for _, v in rows), default=0.0)
    label_w = max((len(l) for l, _ in rows), default=0)
    out = []
    for label, value in rows:
        bar = "#" * (round(width * value / top) if top > 0 else 0)
        out.append(f"{label:>{label_w}} | {bar} {value_format.format(value)}")
    return "\n".join(out)
