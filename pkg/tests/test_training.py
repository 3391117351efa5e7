import math

import numpy as np
import pytest

from abdnmt.data import PAD_ID, gen_synthetic
from abdnmt.errors import DataError, InputError, NumericError
from abdnmt.model import ModelConfig, init_model, joint_loss
from abdnmt.tensor import ParamStore, clip_global_norm
from abdnmt.training import (
    Batch,
    OptimizerState,
    TrainConfig,
    make_batches,
    rmsprop_update,
    train,
)


# ---------------------------------------------------------------------------
# rmsprop


def one_param_store(value, grad):
    store = ParamStore()
    v = store.add("w", np.array(value, dtype=np.float64))
    v.grad[:] = grad
    return store


def test_rmsprop_zero_gradient_is_noop():
    store = one_param_store([[1.0, 2.0]], [[0.0, 0.0]])
    opt = OptimizerState(store)
    rmsprop_update(opt, store, lr=0.1)
    assert np.array_equal(store.get("w").value.data, [[1.0, 2.0]])


def test_rmsprop_first_step_hand_value():
    # g=1: n=0.05, m=0.05, n-m^2=0.0475; delta = -lr/sqrt(0.0475+1e-4)
    store = one_param_store([[0.0]], [[1.0]])
    opt = OptimizerState(store)
    lr = 0.25
    rmsprop_update(opt, store, lr=lr, rho=0.95, eps=1e-4)
    expected = -lr / math.sqrt(0.0475 + 1e-4)
    assert store.get("w").value.data[0, 0] == pytest.approx(expected, rel=1e-9)
    assert expected / lr == pytest.approx(-4.583, abs=1e-3)


def test_rmsprop_clears_gradients():
    store = one_param_store([[0.0]], [[1.0]])
    opt = OptimizerState(store)
    rmsprop_update(opt, store, lr=0.1)
    assert not store.get("w").grad.any()
    assert opt.step == 1


def test_rmsprop_plain_variant_differs():
    s1 = one_param_store([[0.0]], [[1.0]])
    s2 = one_param_store([[0.0]], [[1.0]])
    rmsprop_update(OptimizerState(s1), s1, lr=0.1, plain=False)
    rmsprop_update(OptimizerState(s2), s2, lr=0.1, plain=True)
    assert s1.get("w").value.data[0, 0] != s2.get("w").value.data[0, 0]


def test_rmsprop_denominator_stays_positive(rng):
    store = ParamStore()
    v = store.add("w", np.zeros((4, 4)))
    opt = OptimizerState(store)
    for _ in range(50):
        v.grad[:] = rng.normal(size=(4, 4))
        rmsprop_update(opt, store, lr=1e-3)
        var = opt.n["w"] - opt.m["w"] ** 2
        assert (var >= -1e-7).all()


def test_rmsprop_rejects_non_finite():
    store = one_param_store([[0.0]], [[np.inf]])
    with pytest.raises(NumericError):
        rmsprop_update(OptimizerState(store), store, lr=0.1)


def test_rmsprop_deterministic():
    def run():
        store = one_param_store([[0.5]], [[0.0]])
        opt = OptimizerState(store)
        rng = np.random.default_rng(3)
        for _ in range(20):
            store.get("w").value.grad[:] = rng.normal()
            rmsprop_update(opt, store, lr=1e-2)
        return store.get("w").value.data.copy()

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# batching


def id_pairs(spec):
    return [([4] * s, [5] * t) for s, t in spec]


def test_make_batches_filters_overlong():
    pairs = id_pairs([(51, 3), (3, 51), (50, 50), (2, 2)])
    batches = make_batches(pairs, 10, 50, seed=0)
    assert sum(len(b) for b in batches) == 2


def test_make_batches_keeps_all_short_pairs():
    pairs = id_pairs([(3, 4)] * 23)
    batches = make_batches(pairs, 10, 50, seed=0)
    assert sum(len(b) for b in batches) == 23
    assert [len(b) for b in batches] == [10, 10, 3]


def test_make_batches_empty_after_filter():
    with pytest.raises(DataError):
        make_batches(id_pairs([(60, 60)]), 10, 50, seed=0)


def test_batch_masks_match_lengths():
    pairs = [([4, 5, 6], [7, 8]), ([4], [7, 8, 9, 10])]
    (batch,) = make_batches(pairs, 10, 50, seed=0)
    for i in range(2):
        row_src = batch.src[i]
        assert batch.src_mask[i].sum() == (row_src != PAD_ID).sum()
        assert batch.tgt_mask[i].sum() == (batch.tgt[i] != PAD_ID).sum()
        assert np.array_equal(batch.rev_mask[i], batch.tgt_mask[i])


def test_batch_reversed_targets():
    pairs = [([4, 5], [7, 8, 9])]
    (batch,) = make_batches(pairs, 4, 50, seed=0)
    assert list(batch.tgt[0]) == [7, 8, 9]
    assert list(batch.rev_tgt[0]) == [9, 8, 7]


def test_make_batches_shuffle_deterministic():
    pairs = [([4 + i % 3], [4 + i % 5]) for i in range(40)]
    a = make_batches(pairs, 8, 50, seed=7)
    b = make_batches(pairs, 8, 50, seed=7)
    for x, y in zip(a, b):
        assert np.array_equal(x.src, y.src)
    c = make_batches(pairs, 8, 50, seed=8)
    assert any(not np.array_equal(x.src, y.src) for x, y in zip(a, c))


# ---------------------------------------------------------------------------
# training loop


def small_setup(n=48, task="copy"):
    corpus = gen_synthetic(task, n, seed=3, len_range=(2, 5), vocab_size=6)
    dev = gen_synthetic(task, 8, seed=4, len_range=(2, 5), vocab_size=6)
    return corpus, dev


def toy_configs(**over):
    model = ModelConfig(src_vocab_size=1, tgt_vocab_size=1, embed_dim=8, hidden_dim=12,
                        dropout=0.0, init_std=0.1)
    defaults = dict(learning_rate=1e-3, batch_size=16, clip_norm=5.0, epochs=2,
                    max_len=50, vocab_size=100, seed=9, dev_beam=2, eps=1e-6)
    defaults.update(over)
    return model, TrainConfig(**defaults)


def test_overfit_single_batch_loss_decreases(rng):
    """Loss strictly decreases over updates 5..55 when hammering one batch."""
    corpus = gen_synthetic("copy", 8, seed=1, len_range=(2, 4), vocab_size=6)
    from abdnmt.data import build_vocab, encode_corpus

    sv = build_vocab(corpus.sources(), 50)
    tv = build_vocab(corpus.targets(), 50)
    (batch,) = make_batches(encode_corpus(corpus, sv, tv), 8, 50, seed=0)
    cfg = ModelConfig(src_vocab_size=len(sv), tgt_vocab_size=len(tv), embed_dim=8,
                      hidden_dim=12, dropout=0.0, init_std=0.1)
    params = init_model(cfg, 0)
    opt = OptimizerState(params.store)
    losses = []
    for step in range(56):
        res = joint_loss(params, batch, train=True, rng=np.random.default_rng([7, step]))
        res.loss.backward()
        clip_global_norm(params.store, 5.0)
        rmsprop_update(opt, params.store, 1e-3)
        losses.append(res.loss.item())
    assert all(losses[i + 1] < losses[i] for i in range(5, 55))


def test_train_writes_artifacts(tmp_path):
    corpus, dev = small_setup()
    model_config, train_config = toy_configs()
    result = train(corpus, dev, model_config, train_config, tmp_path / "run")
    assert result.checkpoint_path.exists()
    assert result.metrics_path.exists()
    assert (tmp_path / "run" / "src.vocab").exists()
    lines = result.metrics_path.read_text().splitlines()
    assert lines[0].startswith("#")
    # one line per update plus one per dev evaluation
    assert len(lines) > 2
    assert len(result.epoch_summaries) == 2
    assert 0.0 <= result.best_bleu <= 1.0


def test_train_metrics_columns(tmp_path):
    corpus, dev = small_setup()
    model_config, train_config = toy_configs(epochs=1)
    result = train(corpus, dev, model_config, train_config, tmp_path / "run")
    rows = [l.split("\t") for l in result.metrics_path.read_text().splitlines()[1:]]
    assert all(len(r) == 7 for r in rows)
    evaluated = [r for r in rows if r[6] != ""]
    assert len(evaluated) == 1  # dev_every=0 -> one eval at epoch end
    float(evaluated[0][6])  # parses as a number


def test_train_lambda_endpoints_logged(tmp_path):
    corpus, dev = small_setup()
    for lam, fcol, bcol in ((1.0, False, True), (0.0, True, False)):
        model_config, train_config = toy_configs(epochs=1)
        model_config.lam = lam
        result = train(corpus, dev, model_config, train_config, tmp_path / f"run{lam}")
        row = result.metrics_path.read_text().splitlines()[1].split("\t")
        assert (row[3] == "nan") == fcol  # forward nll missing iff lam == 0
        assert (row[4] == "nan") == bcol


def test_train_determinism(tmp_path):
    corpus, dev = small_setup()
    outs = []
    for d in ("a", "b"):
        model_config, train_config = toy_configs()
        result = train(corpus, dev, model_config, train_config, tmp_path / d)
        outs.append(result)
    m0 = outs[0].metrics_path.read_bytes()
    m1 = outs[1].metrics_path.read_bytes()
    assert m0 == m1
    assert outs[0].checkpoint_path.read_bytes() == outs[1].checkpoint_path.read_bytes()


def test_joint_loss_rejects_nan(rng):
    cfg = ModelConfig(src_vocab_size=9, tgt_vocab_size=9, embed_dim=4, hidden_dim=6, dropout=0.0)
    params = init_model(cfg, 0)
    params.store.get("forward.readout.out_w").value.data[0, 0] = np.nan
    src = rng.integers(4, 9, size=(1, 3))
    tgt = rng.integers(4, 9, size=(1, 3))
    ones = np.ones((1, 3), dtype=np.float32)
    batch = Batch(src, ones, tgt, ones, tgt[:, ::-1].copy(), ones.copy())
    with pytest.raises(NumericError):
        joint_loss(params, batch)


def test_train_nan_aborts(tmp_path, monkeypatch):
    corpus, dev = small_setup()
    model_config, train_config = toy_configs(epochs=1)

    def poisoned(*a, **k):
        raise NumericError("joint loss is not finite: nan")

    monkeypatch.setattr("abdnmt.training.joint_loss", poisoned)
    with pytest.raises(NumericError):
        train(corpus, dev, model_config, train_config, tmp_path / "boom")


def test_train_config_validation():
    with pytest.raises(InputError):
        TrainConfig(batch_size=0)
    with pytest.raises(InputError):
        TrainConfig(epochs=-1)
