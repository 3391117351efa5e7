"""Neural building blocks: embeddings, GRU steps, additive attention, readout.

All functions take batches as rows: a step input is (B x dim).  Attention
keys for a batch live in block layout, (B*N x key_dim) with the N keys of
batch item b occupying rows b*N .. b*N+N-1 (see ``tensor.stack_steps``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import DomainError, ShapeError
from .tensor import Tensor2


def gaussian_init(rng: np.random.Generator, rows: int, cols: int, std: float = 0.01) -> np.ndarray:
    return (rng.standard_normal((rows, cols)) * std).astype(tz.current_dtype())


def orthogonal_init(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random n x n orthogonal matrix (SVD of a Gaussian draw)."""
    a = rng.standard_normal((n, n))
    u, _, v = np.linalg.svd(a)
    return (u @ v).astype(tz.current_dtype())


# ---------------------------------------------------------------------------
# Embeddings


@dataclass
class EmbeddingTable:
    weights: Tensor2  # vocab x embed_dim
    pad_id: int = 0

    @property
    def vocab_size(self) -> int:
        return self.weights.rows

    @property
    def embed_dim(self) -> int:
        return self.weights.cols


def embed_lookup(table: EmbeddingTable, ids) -> Tensor2:
    """Rows of the table selected by id; the pad id yields an exact zero row.

    Masking (rather than relying on a zeroed table row) also keeps gradients
    away from the pad embedding, so it can never drift from zero.
    """
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and idx.max() >= table.vocab_size:
        raise IndexError(f"token id {idx.max()} out of range for vocab of {table.vocab_size}")
    out = tz.gather_rows(table.weights, idx)
    if (idx == table.pad_id).any():
        out = tz.scale_rows(out, (idx != table.pad_id).astype(out.data.dtype))
    return out


# ---------------------------------------------------------------------------
# GRU


@dataclass
class GruParams:
    """Gate weights for a GRU step with k extra context inputs (k in 0..2).

    Update and reset gates and the candidate each get their own input,
    recurrent, and per-context weight blocks, so every gate sees the step
    input, the previous state, and all contexts.
    """

    w_update: Tensor2
    w_reset: Tensor2
    w_cand: Tensor2
    u_update: Tensor2
    u_reset: Tensor2
    u_cand: Tensor2
    c_update: list
    c_reset: list
    c_cand: list
    b_update: Tensor2
    b_reset: Tensor2
    b_cand: Tensor2

    @property
    def n_contexts(self) -> int:
        return len(self.c_update)

    @property
    def hidden_dim(self) -> int:
        return self.u_update.rows


def init_gru(store, prefix: str, input_dim: int, hidden_dim: int, ctx_dims, rng, group: str) -> GruParams:
    """Create GRU parameters in ``store``: Gaussian inputs, orthogonal recurrences, zero biases."""
    def gauss(name, r, c):
        return store.add(f"{prefix}.{name}", gaussian_init(rng, r, c), group)

    def ortho(name):
        return store.add(f"{prefix}.{name}", orthogonal_init(rng, hidden_dim), group)

    def bias(name):
        return store.add(f"{prefix}.{name}", np.zeros((1, hidden_dim), dtype=tz.current_dtype()), group)

    w_update = gauss("w_update", input_dim, hidden_dim)
    w_reset = gauss("w_reset", input_dim, hidden_dim)
    w_cand = gauss("w_cand", input_dim, hidden_dim)
    u_update = ortho("u_update")
    u_reset = ortho("u_reset")
    u_cand = ortho("u_cand")
    c_update, c_reset, c_cand = [], [], []
    for k, dim in enumerate(ctx_dims):
        c_update.append(gauss(f"ctx{k}_update", dim, hidden_dim))
        c_reset.append(gauss(f"ctx{k}_reset", dim, hidden_dim))
        c_cand.append(gauss(f"ctx{k}_cand", dim, hidden_dim))
    return GruParams(
        w_update, w_reset, w_cand, u_update, u_reset, u_cand,
        c_update, c_reset, c_cand, bias("b_update"), bias("b_reset"), bias("b_cand"),
    )


def gru_step(p: GruParams, x: Tensor2, s_prev: Tensor2, contexts=()) -> Tensor2:
    """One GRU step: convex blend of the previous state and a candidate.

    z = sigmoid(x W_z + s U_z + sum_k ctx_k C_zk + b_z)
    r = sigmoid(x W_r + s U_r + sum_k ctx_k C_rk + b_r)
    cand = tanh(x W + (r*s) U + sum_k ctx_k C_k + b)
    s_new = (1 - z)*s + z*cand

    Implemented as one tape node with a hand-derived backward; the loops
    run this hundreds of times per batch and op granularity dominated the
    runtime when it was composed from primitives.
    """
    contexts = tuple(contexts)
    if len(contexts) != p.n_contexts:
        raise ShapeError(f"gru_step: got {len(contexts)} contexts, parameters declare {p.n_contexts}")
    X, S = x.data, s_prev.data
    az = X @ p.w_update.data + S @ p.u_update.data + p.b_update.data
    ar = X @ p.w_reset.data + S @ p.u_reset.data + p.b_reset.data
    ac = X @ p.w_cand.data
    for ctx, cu, cr, cc in zip(contexts, p.c_update, p.c_reset, p.c_cand):
        az += ctx.data @ cu.data
        ar += ctx.data @ cr.data
        ac += ctx.data @ cc.data
    z = tz._sigmoid_arr(az)
    r = tz._sigmoid_arr(ar)
    rs = r * S
    cand = np.tanh(ac + rs @ p.u_cand.data + p.b_cand.data)
    out = S + z * (cand - S)

    parents = (x, s_prev, *contexts,
               p.w_update, p.w_reset, p.w_cand, p.u_update, p.u_reset, p.u_cand,
               *p.c_update, *p.c_reset, *p.c_cand, p.b_update, p.b_reset, p.b_cand)

    def bp(g):
        dc = g * z
        dac = dc * (1.0 - cand * cand)
        drs = dac @ p.u_cand.data.T
        dr = drs * S
        daz = (g * (cand - S)) * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        tz._accum(s_prev, g * (1.0 - z) + drs * r
                  + daz @ p.u_update.data.T + dar @ p.u_reset.data.T)
        tz._accum(x, daz @ p.w_update.data.T + dar @ p.w_reset.data.T + dac @ p.w_cand.data.T)
        tz._accum(p.w_update, X.T @ daz)
        tz._accum(p.w_reset, X.T @ dar)
        tz._accum(p.w_cand, X.T @ dac)
        tz._accum(p.u_update, S.T @ daz)
        tz._accum(p.u_reset, S.T @ dar)
        tz._accum(p.u_cand, rs.T @ dac)
        for ctx, cu, cr, cc in zip(contexts, p.c_update, p.c_reset, p.c_cand):
            tz._accum(ctx, daz @ cu.data.T + dar @ cr.data.T + dac @ cc.data.T)
            tz._accum(cu, ctx.data.T @ daz)
            tz._accum(cr, ctx.data.T @ dar)
            tz._accum(cc, ctx.data.T @ dac)
        tz._accum(p.b_update, daz.sum(axis=0, keepdims=True))
        tz._accum(p.b_reset, dar.sum(axis=0, keepdims=True))
        tz._accum(p.b_cand, dac.sum(axis=0, keepdims=True))

    return tz._make(out, parents, bp)


# ---------------------------------------------------------------------------
# Additive attention


@dataclass
class AttentionParams:
    query_proj: Tensor2  # query_dim x attn_dim
    key_proj: Tensor2    # key_dim x attn_dim
    score_vec: Tensor2   # attn_dim x 1


def init_attention(store, prefix: str, query_dim: int, key_dim: int, attn_dim: int, rng, group: str) -> AttentionParams:
    return AttentionParams(
        query_proj=store.add(f"{prefix}.query_proj", gaussian_init(rng, query_dim, attn_dim), group),
        key_proj=store.add(f"{prefix}.key_proj", gaussian_init(rng, key_dim, attn_dim), group),
        score_vec=store.add(f"{prefix}.score_vec", gaussian_init(rng, attn_dim, 1), group),
    )


@dataclass
class AttentionMemory:
    """Keys with their projection precomputed once, reused every step."""

    keys: Tensor2        # (B*N) x key_dim, block layout
    proj_keys: Tensor2   # (B*N) x attn_dim
    mask: np.ndarray     # B x N boolean
    batch: int
    n_keys: int
    full: bool = False   # True when no key is masked anywhere


def attention_memory(p: AttentionParams, keys: Tensor2, mask) -> AttentionMemory:
    mask = np.asarray(mask, dtype=bool)
    batch, n_keys = mask.shape
    if keys.rows != batch * n_keys:
        raise ShapeError(f"attention keys {keys.rows} rows != batch {batch} * n_keys {n_keys}")
    if not mask.any(axis=1).all():
        raise DomainError("attention: some batch item has every key masked")
    return AttentionMemory(keys, tz.matmul(keys, p.key_proj), mask, batch, n_keys, bool(mask.all()))


def attend(p: AttentionParams, mem: AttentionMemory, query: Tensor2):
    """Additive attention of a (B x query_dim) query over the memory.

    Scores are score_vec . tanh(query_proj q + key_proj k); weights are the
    masked softmax over each item's keys; the context is the weighted sum
    of the raw keys.  Returns (context (B x key_dim), weights (B x N)).
    """
    q = tz.repeat_rows(tz.matmul(query, p.query_proj), mem.n_keys)
    e = tz.matmul(tz.tanh(tz.add(q, mem.proj_keys)), p.score_vec)
    weights = tz.masked_softmax(tz.reshape(e, mem.batch, mem.n_keys), mem.mask)
    wcol = tz.reshape(weights, mem.batch * mem.n_keys, 1)
    context = tz.sum_blocks(tz.scale_rows(mem.keys, wcol), mem.n_keys)
    return context, weights


def attend_context(p: AttentionParams, mem: AttentionMemory, query: Tensor2) -> Tensor2:
    """``attend`` fused into one tape node, returning the context only.

    The decoder loops need just the context; fusing the ~10 primitive ops
    saves most of the per-step tape overhead.  Must stay numerically
    equivalent to ``attend`` (the tests compare the two).
    """
    b, n = mem.batch, mem.n_keys
    Q, K, PK = query.data, mem.keys.data, mem.proj_keys.data
    qp = Q @ p.query_proj.data
    t = np.tanh(np.repeat(qp, n, axis=0) + PK)
    scores = (t @ p.score_vec.data).reshape(b, n)
    if mem.full:
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
    else:
        m = mem.mask
        neg = np.finfo(scores.dtype).min
        rowmax = np.where(m, scores, neg).max(axis=1, keepdims=True)
        e = np.where(m, np.exp(np.where(m, scores - rowmax, 0.0)), 0.0)
    w = e / e.sum(axis=1, keepdims=True)
    wcol = w.reshape(b * n, 1)
    ctx = (K * wcol).reshape(b, n, -1).sum(axis=1)

    parents = (query, mem.keys, mem.proj_keys, p.query_proj, p.score_vec)

    def bp(g):
        g_rep = np.repeat(g, n, axis=0)
        dw = (g_rep * K).sum(axis=1).reshape(b, n)
        de = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        dt = de.reshape(b * n, 1) @ p.score_vec.data.T
        du = dt * (1.0 - t * t)
        dqp = du.reshape(b, n, -1).sum(axis=1)
        tz._accum(mem.keys, g_rep * wcol)
        tz._accum(mem.proj_keys, du)
        tz._accum(query, dqp @ p.query_proj.data.T)
        tz._accum(p.query_proj, Q.T @ dqp)
        tz._accum(p.score_vec, t.T @ de.reshape(b * n, 1))

    return tz._make(ctx, parents, bp)


def additive_attention(p: AttentionParams, query: Tensor2, keys: Tensor2, mask):
    """One-shot attention for callers without a precomputed memory."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask.reshape(1, -1)
    return attend(p, attention_memory(p, keys, mask), query)


# ---------------------------------------------------------------------------
# Readout


@dataclass
class ReadoutParams:
    ff_w: Tensor2   # concat_dim x readout_dim
    ff_b: Tensor2
    out_w: Tensor2  # readout_dim x vocab
    out_b: Tensor2


def init_readout(store, prefix: str, concat_dim: int, readout_dim: int, vocab: int, rng, group: str) -> ReadoutParams:
    return ReadoutParams(
        ff_w=store.add(f"{prefix}.ff_w", gaussian_init(rng, concat_dim, readout_dim), group),
        ff_b=store.add(f"{prefix}.ff_b", np.zeros((1, readout_dim), dtype=tz.current_dtype()), group),
        out_w=store.add(f"{prefix}.out_w", gaussian_init(rng, readout_dim, vocab), group),
        out_b=store.add(f"{prefix}.out_b", np.zeros((1, vocab), dtype=tz.current_dtype()), group),
    )


def readout_logprobs(p: ReadoutParams, prev_emb: Tensor2, state: Tensor2, contexts, drop=None) -> Tensor2:
    """Next-token log-probabilities from [prev embedding; state; contexts].

    The concatenation goes through a tanh feed-forward layer and a vocab
    projection, then log-softmax, so each row logsumexps to 0.  The tail
    after the concatenation is one fused tape node (hot path).
    """
    cat = tz.concat_cols([prev_emb, state, *contexts])
    if cat.cols != p.ff_w.rows:
        raise ShapeError(f"readout: concat width {cat.cols} != expected {p.ff_w.rows}")
    if drop is not None:
        cat = drop(cat)

    C = cat.data
    hidden = np.tanh(C @ p.ff_w.data + p.ff_b.data)
    logits = hidden @ p.out_w.data + p.out_b.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def bp(g):
        dlogits = g - np.exp(ls) * g.sum(axis=1, keepdims=True)
        dh = dlogits @ p.out_w.data.T
        da = dh * (1.0 - hidden * hidden)
        tz._accum(cat, da @ p.ff_w.data.T)
        tz._accum(p.ff_w, C.T @ da)
        tz._accum(p.ff_b, da.sum(axis=0, keepdims=True))
        tz._accum(p.out_w, hidden.T @ dlogits)
        tz._accum(p.out_b, dlogits.sum(axis=0, keepdims=True))

    return tz._make(ls, (cat, p.ff_w, p.ff_b, p.out_w, p.out_b), bp)


# ---------------------------------------------------------------------------
# Dropout


def readout_nll(p: ReadoutParams, prev_emb: Tensor2, state: Tensor2, contexts,
                labels: np.ndarray, step_mask: np.ndarray, keep_mask: np.ndarray | None = None) -> Tensor2:
    """Per-row negative log-probability of ``labels`` under the readout.

    The teacher-forced inner loop fused into one tape node: concatenation,
    dropout via a precomputed ``keep_mask``, feed-forward, log-softmax, and
    the label pick scaled by ``step_mask`` (padded rows contribute exactly
    0).  Semantically ``-readout_logprobs(...)[i, labels[i]] * step_mask[i]``.
    """
    inputs = (prev_emb, state, *contexts)
    cat = np.concatenate([t.data for t in inputs], axis=1)
    if cat.shape[1] != p.ff_w.rows:
        raise ShapeError(f"readout: concat width {cat.shape[1]} != expected {p.ff_w.rows}")
    if keep_mask is not None:
        cat = cat * keep_mask
    hidden = np.tanh(cat @ p.ff_w.data + p.ff_b.data)
    logits = hidden @ p.out_w.data + p.out_b.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(cat.shape[0])
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    smask = np.asarray(step_mask, dtype=cat.dtype).reshape(-1)
    out = (-ls[rows, labels] * smask).reshape(-1, 1)
    offs = np.cumsum([0] + [t.cols for t in inputs])

    def bp(g):
        dls = np.zeros_like(ls)
        dls[rows, labels] = -g[:, 0] * smask
        dlogits = dls - np.exp(ls) * dls.sum(axis=1, keepdims=True)
        dh = dlogits @ p.out_w.data.T
        da = dh * (1.0 - hidden * hidden)
        dcat = da @ p.ff_w.data.T
        if keep_mask is not None:
            dcat = dcat * keep_mask
        for t, a, b in zip(inputs, offs[:-1], offs[1:]):
            tz._accum(t, dcat[:, a:b])
        tz._accum(p.ff_w, cat.T @ da)
        tz._accum(p.ff_b, da.sum(axis=0, keepdims=True))
        tz._accum(p.out_w, hidden.T @ dlogits)
        tz._accum(p.out_b, dlogits.sum(axis=0, keepdims=True))

    return tz._make(out, (*inputs, p.ff_w, p.ff_b, p.out_w, p.out_b), bp)


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype) -> np.ndarray:
    """Inverted-dropout keep mask: 0 with probability ``rate``, else 1/(1-rate)."""
    return (rng.random(shape) >= rate).astype(dtype) / (1.0 - rate)


def dropout(t: Tensor2, rate: float, rng: np.random.Generator) -> Tensor2:
    """Inverted dropout: zero entries with probability ``rate``, scale the rest."""
    if rate <= 0.0:
        return t
    return tz.mul_const(t, dropout_mask(t.shape, rate, rng, t.data.dtype))
