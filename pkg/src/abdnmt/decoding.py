"""Two-phase inference and the unidirectional baseline decoders.

Phase one greedily decodes right-to-left to obtain the backward trace;
phase two beam-searches the forward decoder, which attends to the source
annotations and the trace.  Everything here runs with the tape disabled
and one sentence at a time, using the beam as the row dimension.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .data import BOS_ID, EOS_ID, PAD_ID
from .errors import InputError
from .layers import AttentionMemory, attend_context, attention_memory, embed_lookup, gru_step, readout_logprobs
from .model import Annotations, BackwardTrace, ModelParams, backward_greedy_trace, encode
from .tensor import Tensor2

logger = logging.getLogger(__name__)

SPECIAL_IDS = (PAD_ID, BOS_ID, EOS_ID)


@dataclass
class Hypothesis:
    """A partial translation on the beam."""

    tokens: list          # emitted ids, including the stop symbol once finished
    score: float          # cumulative log-probability
    state: np.ndarray     # decoder state after consuming tokens
    finished: bool = False


def _tiled_memory(mem: AttentionMemory, k: int) -> AttentionMemory:
    """The single-sentence memory replicated for k beam rows."""
    return AttentionMemory(
        keys=Tensor2(np.tile(mem.keys.data, (k, 1))),
        proj_keys=Tensor2(np.tile(mem.proj_keys.data, (k, 1))),
        mask=np.tile(mem.mask, (k, 1)),
        batch=k,
        n_keys=mem.n_keys,
        full=mem.full,
    )


def _beam_search(step_fn, init_state: np.ndarray, first_input: int, stop_id: int,
                 beam: int, max_len: int) -> list[Hypothesis]:
    """Breadth-limited search over a step function.

    ``step_fn(prev_ids, states)`` maps the previous token of each live row
    and its state to (log-probabilities, new states).  Finished hypotheses
    keep their score and keep occupying beam slots.  Rows still live at
    ``max_len`` are returned unterminated.
    """
    if beam < 1:
        raise InputError(f"beam must be >= 1, got {beam}")
    hyps = [Hypothesis([], 0.0, init_state[0], False)]
    for _ in range(max_len):
        live = [h for h in hyps if not h.finished]
        if not live:
            break
        ids = np.array([h.tokens[-1] if h.tokens else first_input for h in live], dtype=np.int64)
        states = np.stack([h.state for h in live])
        logprobs, new_states = step_fn(ids, states)
        vocab = logprobs.shape[1]
        top_k = min(beam, vocab)
        candidates = []  # (score, source hyp index or None, token or finished hyp)
        for i, h in enumerate(live):
            cols = np.argpartition(logprobs[i], vocab - top_k)[vocab - top_k:]
            for v in cols:
                candidates.append((h.score + float(logprobs[i, v]), i, int(v)))
        for h in hyps:
            if h.finished:
                candidates.append((h.score, None, h))
        candidates.sort(key=lambda c: -c[0])
        next_hyps = []
        for score, i, item in candidates[:beam]:
            if i is None:
                next_hyps.append(item)
            else:
                next_hyps.append(Hypothesis(live[i].tokens + [item], score, new_states[i], item == stop_id))
        hyps = next_hyps
    hyps.sort(key=lambda h: -h.score)
    return hyps


def _forward_step_fn(params: ModelParams, ann: Annotations, trace: BackwardTrace | None):
    src_mem = attention_memory(params.fwd_src_attn, ann.h, ann.mask)
    trace_mem = None
    if params.config.mode == "abd":
        trace_mem = attention_memory(params.fwd_trace_attn, trace.states, trace.mask)

    def step(prev_ids, states):
        k = len(prev_ids)
        x = embed_lookup(params.fwd_tgt_emb, prev_ids)
        s_prev = Tensor2(states)
        ctxs = [attend_context(params.fwd_src_attn, _tiled_memory(src_mem, k), s_prev)]
        if trace_mem is not None:
            ctxs.append(attend_context(params.fwd_trace_attn, _tiled_memory(trace_mem, k), s_prev))
        s = gru_step(params.fwd_gru, x, s_prev, ctxs)
        lp = readout_logprobs(params.fwd_readout, x, s, ctxs)
        return lp.data, s.data

    return step, ann.back_first.data


def _backward_step_fn(params: ModelParams, ann: Annotations):
    mem = attention_memory(params.bwd_attn, ann.h, ann.mask)
    init = tz.tanh(tz.matmul(ann.fwd_last, params.bwd_init_proj))

    def step(prev_ids, states):
        k = len(prev_ids)
        x = embed_lookup(params.bwd_tgt_emb, prev_ids)
        s_prev = Tensor2(states)
        ctx = attend_context(params.bwd_attn, _tiled_memory(mem, k), s_prev)
        s = gru_step(params.bwd_gru, x, s_prev, [ctx])
        lp = readout_logprobs(params.bwd_readout, x, s, [ctx])
        return lp.data, s.data

    return step, init.data


def beam_search_forward(params: ModelParams, ann: Annotations, trace: BackwardTrace | None,
                        beam: int, max_len: int) -> list[Hypothesis]:
    """Beam search over the forward decoder; results sorted by score, best first."""
    if params.config.mode == "abd" and trace is None:
        raise InputError("beam_search_forward needs a backward trace in abd mode")
    with tz.no_grad():
        step, init = _forward_step_fn(params, ann, trace)
        return _beam_search(step, init, BOS_ID, EOS_ID, beam, max_len)


def _encode_one(params: ModelParams, src_ids) -> Annotations:
    src = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
    if src.size == 0:
        raise InputError("cannot translate an empty source")
    return encode(params, src, np.ones_like(src, dtype=bool))


def _strip_specials(tokens) -> list[int]:
    return [int(t) for t in tokens if int(t) not in SPECIAL_IDS]


def translate(params: ModelParams, src_ids, beam: int = 10, max_len: int | None = None) -> list[int]:
    """Two-phase decode of one sentence: greedy backward trace, then forward beam."""
    if params.config.mode == "l2r":
        return translate_l2r_baseline(params, src_ids, beam, max_len)
    if params.config.mode == "r2l":
        return translate_r2l_baseline(params, src_ids, beam, max_len)
    with tz.no_grad():
        ann = _encode_one(params, src_ids)
        budget = max_len or params.config.trace_budget(ann.n_keys)
        trace = backward_greedy_trace(params, ann, budget)
        if not trace.stopped[0]:
            logger.warning("backward trace hit the length budget (%d) without the stop symbol", budget)
        hyps = beam_search_forward(params, ann, trace, beam, budget)
    return _strip_specials(hyps[0].tokens)


def translate_l2r_baseline(params: ModelParams, src_ids, beam: int = 10,
                           max_len: int | None = None) -> list[int]:
    """Decode with the source-attention-only forward decoder (l2r configuration)."""
    if params.config.mode != "l2r":
        raise InputError(f"translate_l2r_baseline needs an l2r model, got mode {params.config.mode!r}")
    with tz.no_grad():
        ann = _encode_one(params, src_ids)
        budget = max_len or params.config.trace_budget(ann.n_keys)
        hyps = beam_search_forward(params, ann, None, beam, budget)
    return _strip_specials(hyps[0].tokens)


def translate_r2l_baseline(params: ModelParams, src_ids, beam: int = 10,
                           max_len: int | None = None) -> list[int]:
    """Beam search over the backward decoder alone; output re-reversed."""
    if not params.config.has_backward:
        raise InputError(f"translate_r2l_baseline needs a backward decoder, got mode {params.config.mode!r}")
    with tz.no_grad():
        ann = _encode_one(params, src_ids)
        budget = max_len or params.config.trace_budget(ann.n_keys)
        step, init = _backward_step_fn(params, ann)
        hyps = _beam_search(step, init, EOS_ID, BOS_ID, beam, budget)
    return _strip_specials(hyps[0].tokens)[::-1]


def batch_translate(params: ModelParams, sources, beam: int = 10, threads: int | None = None):
    """Translate many sentences, optionally on a thread pool, preserving order."""
    if threads is None:
        threads = int(os.environ.get("ABD_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda s: translate(params, s, beam), sources))
    return [translate(params, s, beam) for s in sources]
