"""The full translation model: encoder, backward decoder, forward decoder.

Three architectures share this module:

* ``abd``  - bidirectional encoder, a right-to-left (backward) decoder whose
  hidden states are recorded as a trace, and a left-to-right (forward)
  decoder that attends to both the source annotations and the trace.
* ``l2r``  - encoder plus the forward decoder with source attention only
  (the conventional attentional baseline).
* ``r2l``  - encoder plus the backward decoder alone.

Batch convention: token matrices are (B x T) int arrays, masks are (B x T)
with 1.0 marking real tokens; all step tensors are (B x dim).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .data import BOS_ID, EOS_ID, PAD_ID
from .errors import InputError, NumericError, ShapeError
from .layers import (
    AttentionParams,
    EmbeddingTable,
    GruParams,
    ReadoutParams,
    attend_context,
    attention_memory,
    dropout,
    dropout_mask,
    embed_lookup,
    gaussian_init,
    gru_step,
    orthogonal_init,
    readout_logprobs,
    readout_nll,
)
from .tensor import ParamStore, Tensor2

MODES = ("abd", "l2r", "r2l")


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    embed_dim: int = 620
    hidden_dim: int = 1000
    attn_dim: int | None = None      # defaults to hidden_dim
    readout_dim: int | None = None   # defaults to embed_dim
    lam: float = 0.7                 # forward-term weight of the joint objective
    dropout: float = 0.3
    detach_backward_trace: bool = False
    share_target_embeddings: bool = True
    mode: str = "abd"
    trace_len_factor: int = 2        # backward decode budget: factor * src_len + extra
    trace_len_extra: int = 10
    init_std: float = 0.01           # paper-scale default; desk-scale runs want ~0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise InputError(f"lambda must lie in [0, 1], got {self.lam}")
        for name in ("src_vocab_size", "tgt_vocab_size", "embed_dim", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")

    @property
    def attn(self) -> int:
        return self.attn_dim or self.hidden_dim

    @property
    def readout(self) -> int:
        return self.readout_dim or self.embed_dim

    @property
    def has_backward(self) -> bool:
        return self.mode in ("abd", "r2l")

    @property
    def has_forward(self) -> bool:
        return self.mode in ("abd", "l2r")

    def trace_budget(self, src_len: int) -> int:
        return self.trace_len_factor * src_len + self.trace_len_extra


# ---------------------------------------------------------------------------
# Parameter manifest
#
# One declaration drives init_model, count_params, and the checkpoint
# manifest, so shapes can never drift apart.


@dataclass
class ParamSpec:
    name: str
    rows: int
    cols: int
    group: str
    init: str  # gauss | ortho | zero | embed


def param_shapes(config: ModelConfig) -> list[ParamSpec]:
    e, d, a, r = config.embed_dim, config.hidden_dim, config.attn, config.readout
    vs, vt = config.src_vocab_size, config.tgt_vocab_size
    specs: list[ParamSpec] = []

    def emb(name, vocab, group):
        specs.append(ParamSpec(name, vocab, e, group, "embed"))

    def gru(prefix, input_dim, ctx_dims, group):
        for gate in ("update", "reset", "cand"):
            specs.append(ParamSpec(f"{prefix}.w_{gate}", input_dim, d, group, "gauss"))
        for gate in ("update", "reset", "cand"):
            specs.append(ParamSpec(f"{prefix}.u_{gate}", d, d, group, "ortho"))
        for k, dim in enumerate(ctx_dims):
            for gate in ("update", "reset", "cand"):
                specs.append(ParamSpec(f"{prefix}.ctx{k}_{gate}", dim, d, group, "gauss"))
        for gate in ("update", "reset", "cand"):
            specs.append(ParamSpec(f"{prefix}.b_{gate}", 1, d, group, "zero"))

    def attn(prefix, query_dim, key_dim, group):
        specs.append(ParamSpec(f"{prefix}.query_proj", query_dim, a, group, "gauss"))
        specs.append(ParamSpec(f"{prefix}.key_proj", key_dim, a, group, "gauss"))
        specs.append(ParamSpec(f"{prefix}.score_vec", a, 1, group, "gauss"))

    def readout(prefix, concat_dim, group):
        specs.append(ParamSpec(f"{prefix}.ff_w", concat_dim, r, group, "gauss"))
        specs.append(ParamSpec(f"{prefix}.ff_b", 1, r, group, "zero"))
        specs.append(ParamSpec(f"{prefix}.out_w", r, vt, group, "gauss"))
        specs.append(ParamSpec(f"{prefix}.out_b", 1, vt, group, "zero"))

    emb("src_emb", vs, "encoder")
    if config.share_target_embeddings or not (config.has_backward and config.has_forward):
        emb("tgt_emb", vt, "shared")
    else:
        emb("backward.tgt_emb", vt, "backward")
        emb("forward.tgt_emb", vt, "forward")
    gru("encoder.fwd", e, [], "encoder")
    gru("encoder.bwd", e, [], "encoder")
    if config.has_backward:
        specs.append(ParamSpec("backward.init_proj", d, d, "backward", "gauss"))
        gru("backward.gru", e, [2 * d], "backward")
        attn("backward.src_attn", d, 2 * d, "backward")
        readout("backward.readout", e + d + 2 * d, "backward")
    if config.has_forward:
        ctx_dims = [2 * d] + ([d] if config.mode == "abd" else [])
        gru("forward.gru", e, ctx_dims, "forward")
        attn("forward.src_attn", d, 2 * d, "forward")
        if config.mode == "abd":
            attn("forward.trace_attn", d, d, "forward")
        readout("forward.readout", e + d + sum(ctx_dims), "forward")
    return specs


def count_params(config: ModelConfig) -> int:
    """Total number of scalar parameters, straight off the shape manifest."""
    return sum(s.rows * s.cols for s in param_shapes(config))


# ---------------------------------------------------------------------------
# Model parameters


@dataclass
class ModelParams:
    config: ModelConfig
    store: ParamStore
    src_emb: EmbeddingTable = None
    bwd_tgt_emb: EmbeddingTable = None
    fwd_tgt_emb: EmbeddingTable = None
    enc_fwd: GruParams = None
    enc_bwd: GruParams = None
    bwd_init_proj: Tensor2 = None
    bwd_gru: GruParams = None
    bwd_attn: AttentionParams = None
    bwd_readout: ReadoutParams = None
    fwd_gru: GruParams = None
    fwd_src_attn: AttentionParams = None
    fwd_trace_attn: AttentionParams = None
    fwd_readout: ReadoutParams = None


def _gru_view(store: ParamStore, prefix: str, n_ctx: int) -> GruParams:
    g = lambda name: store.get(f"{prefix}.{name}").value
    return GruParams(
        g("w_update"), g("w_reset"), g("w_cand"),
        g("u_update"), g("u_reset"), g("u_cand"),
        [g(f"ctx{k}_update") for k in range(n_ctx)],
        [g(f"ctx{k}_reset") for k in range(n_ctx)],
        [g(f"ctx{k}_cand") for k in range(n_ctx)],
        g("b_update"), g("b_reset"), g("b_cand"),
    )


def _attn_view(store: ParamStore, prefix: str) -> AttentionParams:
    g = lambda name: store.get(f"{prefix}.{name}").value
    return AttentionParams(g("query_proj"), g("key_proj"), g("score_vec"))


def _readout_view(store: ParamStore, prefix: str) -> ReadoutParams:
    g = lambda name: store.get(f"{prefix}.{name}").value
    return ReadoutParams(g("ff_w"), g("ff_b"), g("out_w"), g("out_b"))


def wire_views(params: ModelParams) -> ModelParams:
    """Attach typed views over the raw store (used after init and after load)."""
    config, store = params.config, params.store
    params.src_emb = EmbeddingTable(store.get("src_emb").value, PAD_ID)
    if "tgt_emb" in store:
        shared = EmbeddingTable(store.get("tgt_emb").value, PAD_ID)
        params.bwd_tgt_emb = shared if config.has_backward else None
        params.fwd_tgt_emb = shared if config.has_forward else None
    else:
        params.bwd_tgt_emb = EmbeddingTable(store.get("backward.tgt_emb").value, PAD_ID)
        params.fwd_tgt_emb = EmbeddingTable(store.get("forward.tgt_emb").value, PAD_ID)
    params.enc_fwd = _gru_view(store, "encoder.fwd", 0)
    params.enc_bwd = _gru_view(store, "encoder.bwd", 0)
    if config.has_backward:
        params.bwd_init_proj = store.get("backward.init_proj").value
        params.bwd_gru = _gru_view(store, "backward.gru", 1)
        params.bwd_attn = _attn_view(store, "backward.src_attn")
        params.bwd_readout = _readout_view(store, "backward.readout")
    if config.has_forward:
        params.fwd_gru = _gru_view(store, "forward.gru", 2 if config.mode == "abd" else 1)
        params.fwd_src_attn = _attn_view(store, "forward.src_attn")
        if config.mode == "abd":
            params.fwd_trace_attn = _attn_view(store, "forward.trace_attn")
        params.fwd_readout = _readout_view(store, "forward.readout")
    return params


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters: Gaussian(0, init_std^2) weights, orthogonal
    recurrences, zero biases, zeroed pad embedding rows.  Deterministic per
    seed.  The 0.01 default matches the usual large-scale recipe; at desk
    scale it leaves signals too small to train in a few thousand updates,
    so toy runs should raise it (0.1 works well)."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for spec in param_shapes(config):
        if spec.init == "gauss":
            data = gaussian_init(rng, spec.rows, spec.cols, config.init_std)
        elif spec.init == "ortho":
            data = orthogonal_init(rng, spec.rows)
        elif spec.init == "zero":
            data = np.zeros((spec.rows, spec.cols), dtype=tz.current_dtype())
        elif spec.init == "embed":
            data = gaussian_init(rng, spec.rows, spec.cols, config.init_std)
            data[PAD_ID] = 0.0
        else:  # pragma: no cover
            raise InputError(f"unknown init kind {spec.init!r}")
        store.add(spec.name, data, spec.group)
    return wire_views(ModelParams(config, store))


# ---------------------------------------------------------------------------
# Encoder


@dataclass
class Annotations:
    """Encoder output: per-position vectors [fwd_state; bwd_state] in block layout."""

    h: Tensor2            # (B*N) x 2d
    mask: np.ndarray      # B x N boolean
    batch: int
    n_keys: int
    back_first: Tensor2   # B x d, backward-scan state at the first position
    fwd_last: Tensor2     # B x d, forward-scan state at each sentence's last real token


def _where_rows(cond: np.ndarray, a: Tensor2, b: Tensor2) -> Tensor2:
    """Row-wise select: cond[i] ? a[i] : b[i] (cond is a constant bool vector)."""
    m = cond.astype(a.data.dtype).reshape(-1)
    return tz.add(tz.scale_rows(a, m), tz.scale_rows(b, 1.0 - m))


def encode(params: ModelParams, src_ids: np.ndarray, src_mask: np.ndarray) -> Annotations:
    """Bidirectional GRU scan over the source; both directions start from zero.

    Padded positions carry the running state through unchanged, so the
    backward scan (which meets the padding first) is unaffected by it.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    mask = np.asarray(src_mask).astype(bool)
    if src_ids.ndim != 2:
        raise ShapeError(f"src_ids must be (batch x len), got {src_ids.shape}")
    if not mask.any(axis=1).all():
        raise InputError("encode: empty source sentence in batch")
    b, n = src_ids.shape
    d = params.config.hidden_dim

    embs = [embed_lookup(params.src_emb, src_ids[:, i]) for i in range(n)]
    fwd_states = [None] * n
    state = Tensor2.zeros(b, d)
    for i in range(n):
        new = gru_step(params.enc_fwd, embs[i], state)
        state = _where_rows(mask[:, i], new, state) if not mask[:, i].all() else new
        fwd_states[i] = state
    fwd_last = state

    bwd_states = [None] * n
    state = Tensor2.zeros(b, d)
    for i in range(n - 1, -1, -1):
        new = gru_step(params.enc_bwd, embs[i], state)
        state = _where_rows(mask[:, i], new, state) if not mask[:, i].all() else new
        bwd_states[i] = state
    back_first = state

    h = tz.stack_steps([tz.concat_cols([fwd_states[i], bwd_states[i]]) for i in range(n)])
    return Annotations(h, mask, b, n, back_first, fwd_last)


# ---------------------------------------------------------------------------
# Backward decoder


@dataclass
class BackwardTrace:
    """States and emissions of one right-to-left decode, consumed by the
    forward decoder's second attention."""

    states: Tensor2       # (B*T) x d, block layout
    tokens: np.ndarray    # B x T emitted ids (reversed order), pad after stop
    mask: np.ndarray      # B x T, True for steps up to and including the stop emission
    stopped: np.ndarray   # B, True if the row emitted the stop symbol in budget
    batch: int = 0
    length: int = 0

    def __post_init__(self):
        self.batch, self.length = self.tokens.shape

    def detached(self) -> "BackwardTrace":
        return BackwardTrace(self.states.detach(), self.tokens, self.mask, self.stopped)


def _teacher_steps(tokens: np.ndarray, mask: np.ndarray, first_input: int, final_label: int):
    """Shared input/label/step-mask layout for teacher forcing.

    Inputs are the tokens shifted right behind ``first_input``; labels are
    the tokens followed by ``final_label`` at each row's length; step t is
    live while t <= len(row).
    """
    b, m = tokens.shape
    lens = np.asarray(mask).astype(np.int64).sum(axis=1)
    t = m + 1
    inputs = np.full((b, t), first_input, dtype=np.int64)
    inputs[:, 1:] = tokens
    labels = np.full((b, t), PAD_ID, dtype=np.int64)
    labels[:, :m] = tokens
    labels[np.arange(b), lens] = final_label
    step_mask = np.arange(t)[None, :] <= lens[:, None]
    return inputs, labels, step_mask


def _backward_init_state(params: ModelParams, ann: Annotations) -> Tensor2:
    return tz.tanh(tz.matmul(ann.fwd_last, params.bwd_init_proj))


def backward_teacher_forced(params: ModelParams, ann: Annotations, rev_tgt: np.ndarray,
                            rev_mask: np.ndarray, train: bool = False, rng=None):
    """Negative log-likelihood of the reversed target under the backward decoder.

    Consumes [eos, t_M, ..., t_1] and predicts [t_M, ..., t_1, bos].  Returns
    a (B x 1) per-sentence token-summed nll and the list of per-step states.
    """
    inputs, labels, step_mask = _teacher_steps(np.asarray(rev_tgt, np.int64), rev_mask, EOS_ID, BOS_ID)
    mem = attention_memory(params.bwd_attn, ann.h, ann.mask)
    state = _backward_init_state(params, ann)
    drop_rate = params.config.dropout if train else 0.0
    dtype = state.data.dtype
    cat_width = params.bwd_readout.ff_w.rows
    nll = Tensor2.zeros(ann.batch, 1)
    states = []
    for t in range(inputs.shape[1]):
        x = embed_lookup(params.bwd_tgt_emb, inputs[:, t])
        keep = None
        if drop_rate > 0.0:
            x = dropout(x, drop_rate, rng)
            keep = dropout_mask((ann.batch, cat_width), drop_rate, rng, dtype)
        ctx = attend_context(params.bwd_attn, mem, state)
        state = gru_step(params.bwd_gru, x, state, [ctx])
        step_nll = readout_nll(params.bwd_readout, x, state, [ctx], labels[:, t], step_mask[:, t], keep)
        nll = tz.add(nll, step_nll)
        states.append(state)
    return nll, states


def backward_greedy_trace(params: ModelParams, ann: Annotations, max_len: int,
                          forced_tokens: np.ndarray | None = None) -> BackwardTrace:
    """Free-running right-to-left decode, argmax at every step.

    Emission stops per row once the start symbol comes out (that step's
    state is still part of the trace) or after ``max_len`` steps.  Token
    choices are constants; the states stay on the tape so the forward
    objective can reach the backward parameters through them.

    ``forced_tokens`` replays a fixed emission sequence instead of the
    argmax: the gradient-check harness uses it to pin the (discrete)
    token path while parameters are perturbed.
    """
    if max_len < 1:
        raise InputError(f"max_len must be >= 1, got {max_len}")
    b = ann.batch
    if forced_tokens is not None:
        forced_tokens = np.asarray(forced_tokens, dtype=np.int64)
        max_len = forced_tokens.shape[1]
    mem = attention_memory(params.bwd_attn, ann.h, ann.mask)
    state = _backward_init_state(params, ann)
    alive = np.ones(b, dtype=bool)
    states, token_cols, mask_cols = [], [], []
    inputs = np.full(b, EOS_ID, dtype=np.int64)
    for t in range(max_len):
        x = embed_lookup(params.bwd_tgt_emb, inputs)
        ctx = attend_context(params.bwd_attn, mem, state)
        state = gru_step(params.bwd_gru, x, state, [ctx])
        lp = readout_logprobs(params.bwd_readout, x, state, [ctx])
        if forced_tokens is None:
            ids = lp.data.argmax(axis=1)
        else:
            ids = forced_tokens[:, t]
        emitted = np.where(alive, ids, PAD_ID)
        states.append(state)
        token_cols.append(emitted)
        mask_cols.append(alive.copy())
        alive = alive & (emitted != BOS_ID)
        if not alive.any() and forced_tokens is None:
            break
        inputs = emitted
    return BackwardTrace(
        states=tz.stack_steps(states),
        tokens=np.stack(token_cols, axis=1),
        mask=np.stack(mask_cols, axis=1),
        stopped=~alive,
    )


# ---------------------------------------------------------------------------
# Forward decoder


def forward_teacher_forced(params: ModelParams, ann: Annotations, trace: BackwardTrace | None,
                           tgt: np.ndarray, tgt_mask: np.ndarray, train: bool = False, rng=None) -> Tensor2:
    """Per-sentence nll of the target under the forward decoder.

    The first hidden state is the raw backward-scan encoder state at
    position one.  In abd mode every step attends both to the source
    annotations and to the backward trace; in l2r mode only to the source.
    """
    if params.config.mode == "abd" and trace is None:
        raise InputError("forward decoder in abd mode needs a backward trace")
    inputs, labels, step_mask = _teacher_steps(np.asarray(tgt, np.int64), tgt_mask, BOS_ID, EOS_ID)
    src_mem = attention_memory(params.fwd_src_attn, ann.h, ann.mask)
    trace_mem = None
    if trace is not None:
        if trace.states.cols != params.config.hidden_dim:
            raise ShapeError(
                f"trace state width {trace.states.cols} != decoder hidden {params.config.hidden_dim}")
        trace_mem = attention_memory(params.fwd_trace_attn, trace.states, trace.mask)
    state = ann.back_first
    drop_rate = params.config.dropout if train else 0.0
    dtype = state.data.dtype
    cat_width = params.fwd_readout.ff_w.rows
    nll = Tensor2.zeros(ann.batch, 1)
    for t in range(inputs.shape[1]):
        x = embed_lookup(params.fwd_tgt_emb, inputs[:, t])
        keep = None
        if drop_rate > 0.0:
            x = dropout(x, drop_rate, rng)
            keep = dropout_mask((ann.batch, cat_width), drop_rate, rng, dtype)
        contexts = [attend_context(params.fwd_src_attn, src_mem, state)]
        if trace_mem is not None:
            contexts.append(attend_context(params.fwd_trace_attn, trace_mem, state))
        state = gru_step(params.fwd_gru, x, state, contexts)
        step_nll = readout_nll(params.fwd_readout, x, state, contexts, labels[:, t], step_mask[:, t], keep)
        nll = tz.add(nll, step_nll)
    return nll


# ---------------------------------------------------------------------------
# Joint objective


@dataclass
class LossResult:
    loss: Tensor2                 # 1 x 1, the quantity to minimize
    forward_nll: float = math.nan   # batch mean of per-sentence nll
    backward_nll: float = math.nan
    forward_tokens: int = 0
    backward_tokens: int = 0
    trace: BackwardTrace | None = None


def _mean_over_batch(nll_col: Tensor2) -> Tensor2:
    return tz.scale(tz.sum_all(nll_col), 1.0 / nll_col.rows)


def joint_loss(params: ModelParams, batch, lam: float | None = None, train: bool = False,
               rng=None, trace_tokens: np.ndarray | None = None,
               fixed_trace: BackwardTrace | None = None) -> LossResult:
    """Mean over the batch of lam * forward nll + (1 - lam) * backward nll.

    The forward term consumes a greedy backward trace (optionally replayed
    from ``trace_tokens``); with ``detach_backward_trace`` the trace states
    enter it as constants.  A term whose weight is exactly zero is skipped
    outright, which also keeps its parameters' gradients identically zero.

    ``trace_tokens`` and ``fixed_trace`` are verification hooks for the
    finite-difference harness: the first pins the token path (states still
    recomputed from the parameters), the second substitutes a whole
    constant trace.
    """
    config = params.config
    lam = config.lam if lam is None else lam
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"lambda must lie in [0, 1], got {lam}")
    ann = encode(params, batch.src, batch.src_mask)
    res = LossResult(loss=None)

    need_f = config.has_forward and (lam > 0.0 or config.mode == "l2r")
    need_b = config.has_backward and (lam < 1.0 or config.mode == "r2l")

    terms = []
    if need_b:
        nll_b, _ = backward_teacher_forced(params, ann, batch.rev_tgt, batch.rev_mask, train, rng)
        mean_b = _mean_over_batch(nll_b)
        res.backward_nll = mean_b.item()
        res.backward_tokens = int(np.asarray(batch.rev_mask).sum()) + batch.rev_tgt.shape[0]
        weight = 1.0 if config.mode == "r2l" else 1.0 - lam
        terms.append(mean_b if weight == 1.0 else tz.scale(mean_b, weight))
    if need_f:
        trace = None
        if config.mode == "abd":
            if fixed_trace is not None:
                trace = res.trace = fixed_trace
            else:
                budget = config.trace_budget(int(np.asarray(batch.src_mask).sum(axis=1).max()))
                trace = backward_greedy_trace(params, ann, budget, forced_tokens=trace_tokens)
                res.trace = trace
                if config.detach_backward_trace:
                    trace = trace.detached()
        nll_f = forward_teacher_forced(params, ann, trace, batch.tgt, batch.tgt_mask, train, rng)
        mean_f = _mean_over_batch(nll_f)
        res.forward_nll = mean_f.item()
        res.forward_tokens = int(np.asarray(batch.tgt_mask).sum()) + batch.tgt.shape[0]
        weight = 1.0 if config.mode == "l2r" else lam
        terms.append(mean_f if weight == 1.0 else tz.scale(mean_f, weight))

    res.loss = terms[0] if len(terms) == 1 else tz.add(terms[0], terms[1])
    if not math.isfinite(res.loss.item()):
        raise NumericError(f"joint loss is not finite: {res.loss.item()}")
    return res


# ---------------------------------------------------------------------------
# Gradient-check harness over the joint objective


def joint_loss_grad_check(config: ModelConfig, seed: int = 0, lam: float | None = None,
                          eps: float = 1e-4, tol: float = 1e-4, src_len: int = 5,
                          tgt_len: int = 6, batch: int = 1, weight_scale=(0.15, 0.45),
                          trace_steps: int = 4, analytic_scale: float = 1.0):
    """Finite-difference check of the joint objective on a freshly drawn model.

    Runs in float64.  The check model's weights are redrawn with magnitudes
    uniform in ``weight_scale``: under the production-sized 0.01
    initialization most gradients sit below the central-difference noise
    floor, so the relative-error criterion would measure noise rather than
    correctness.  The discrete parts of the objective are held fixed at the
    unperturbed parameters so the checked function is smooth: the greedy
    token path is replayed (clipped to ``trace_steps``), and when the
    configuration detaches the trace, the whole trace is substituted as a
    constant, mirroring what backpropagation treats as constant in each
    mode.  Returns a ``GradCheckReport``.
    """
    from .training import Batch  # local import; training depends on model

    with tz.precision("float64"):
        params = init_model(config, seed)
        wrng = np.random.default_rng(seed + 7919)
        lo, hi = weight_scale
        for p in params.store:
            if p.name.endswith(("b_update", "b_reset", "b_cand", "ff_b", "out_b")):
                continue  # zero biases keep their healthy gradients
            shape = p.value.data.shape
            sign = np.where(wrng.random(shape) < 0.5, -1.0, 1.0)
            p.value.data[:] = sign * wrng.uniform(lo, hi, size=shape)
            if p.name.endswith("emb"):
                p.value.data[PAD_ID] = 0.0
        rng = np.random.default_rng(seed + 1)
        src = rng.integers(4, config.src_vocab_size, size=(batch, src_len))
        tgt = rng.integers(4, config.tgt_vocab_size, size=(batch, tgt_len))
        src_mask = np.ones_like(src, dtype=np.float64)
        tgt_mask = np.ones_like(tgt, dtype=np.float64)
        if batch > 1:  # give one row a shorter sentence so masking is exercised
            src_mask[-1, -1] = 0.0
            src[-1, -1] = PAD_ID
            tgt_mask[-1, -2:] = 0.0
            tgt[-1, -2:] = PAD_ID
        rev = np.zeros_like(tgt)
        for i in range(batch):
            n = int(tgt_mask[i].sum())
            rev[i, :n] = tgt[i, :n][::-1]
        b = Batch(src, src_mask, tgt, tgt_mask, rev, tgt_mask.copy())

        forced = None
        frozen = None
        if params.config.mode == "abd" and (lam if lam is not None else params.config.lam) > 0.0:
            with tz.no_grad():
                ann = encode(params, b.src, b.src_mask)
                budget = params.config.trace_budget(src_len)
                trace = backward_greedy_trace(params, ann, budget)
                forced = trace.tokens[:, :trace_steps]
                if params.config.detach_backward_trace:
                    # detached states are constants to backprop, so they must
                    # stay constant under perturbation too
                    frozen = backward_greedy_trace(params, ann, budget, forced_tokens=forced)

        def loss_fn(_store):
            return joint_loss(params, b, lam=lam, trace_tokens=forced, fixed_trace=frozen).loss

        return tz.check_gradients(loss_fn, params.store, eps=eps, tol=tol, seed=seed,
                                  analytic_scale=analytic_scale)
